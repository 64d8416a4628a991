use std::io::Write;

use hemlets::container::write_container;
use hemlets::skeleton::canonical_skeleton;
use hemlets::toy::{train_toy, EpochRecord, ToyDataConfig, ToyDataset, TrainConfig, TrainError, TrainRun};
use hemlets::Error;

use crate::config::pick;
use crate::error::{CliError, CliResult};
use crate::files;
use crate::{Globals, TrainArgs};

fn resolve(args: &TrainArgs, globals: &Globals) -> CliResult<(ToyDataConfig, TrainConfig)> {
    let f = &globals.file.train;
    let d = ToyDataConfig::default();
    let t = TrainConfig::default();
    let data = ToyDataConfig {
        n_3d: pick(args.n_3d, f.n_3d, d.n_3d),
        n_2d: pick(args.n_2d, f.n_2d, d.n_2d),
        n_val: pick(args.n_val, f.n_val, d.n_val),
        seed: pick(args.data_seed, f.data_seed, d.seed),
        ..d
    };
    let train = TrainConfig {
        epochs: pick(args.epochs, f.epochs, t.epochs),
        learning_rate: pick(args.lr, f.learning_rate, t.learning_rate),
        final_lr_fraction: pick(args.final_lr, f.final_lr_fraction, t.final_lr_fraction),
        optimizer: pick(args.optimizer.map(Into::into), f.optimizer, t.optimizer),
        batch_size: pick(args.batch, f.batch_size, t.batch_size),
        alpha: pick(args.alpha, f.alpha, t.alpha),
        hidden: pick(args.hidden, f.hidden, t.hidden),
        seed: globals.seed,
    };
    train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if data.n_3d + data.n_2d == 0 {
        return Err(CliError::Config("the training set needs at least one sample".into()));
    }
    Ok((data, train))
}

fn save(args: &TrainArgs, run: &TrainRun) -> CliResult<()> {
    files::write_with(&args.output, |out| write_container(out, &run.model.to_tensors()))?;
    files::write_with(&args.log, |out| {
        for r in &run.log {
            writeln!(out, "{}", r.to_json_line())?;
        }
        Ok(())
    })
}

fn report(r: &EpochRecord) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "epoch {:>4}  l_tot {:.5}  l_3d {:.5}  l_hem {:.5}  l_2d {:.5}  train {}  val {}",
        r.epoch,
        r.losses.l_tot,
        r.losses.l_3d,
        r.losses.l_hem,
        r.losses.l_2d,
        fmt(r.train_mpjpe_voxel),
        fmt(r.val_mpjpe_voxel)
    );
}

pub fn run(args: &TrainArgs, globals: &Globals) -> CliResult<()> {
    let (data_cfg, cfg) = resolve(args, globals)?;
    let dataset = ToyDataset::generate(&data_cfg, &canonical_skeleton()).map_err(|e| match e {
        Error::Config(m) => CliError::Config(m),
        e => CliError::Library(e),
    })?;
    match train_toy(&dataset, &cfg) {
        Ok(run) => {
            for r in &run.log {
                report(r);
            }
            save(args, &run)
        }
        Err(TrainError::Diverged { epoch, last_finite }) => {
            for r in &last_finite.log {
                report(r);
            }
            save(args, &last_finite)?;
            eprintln!("kept the last finite model (epoch {})", epoch - 1);
            Err(Error::TrainingDiverged { epoch }.into())
        }
        Err(TrainError::Other(Error::Config(m))) => Err(CliError::Config(m)),
        Err(TrainError::Other(e)) => Err(e.into()),
    }
}
