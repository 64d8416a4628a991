//! Compares HEMlets-supervised training against the 3D-only baseline over
//! several seeds.
//!
//! Usage: `cargo run --release -p hemlets --example toy_ablation [seeds] [epochs]`

use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use hemlets::skeleton::canonical_skeleton;
use hemlets::toy::{train_toy, ToyDataConfig, ToyDataset, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let epochs: usize = args
        .get(2)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(TrainConfig::default().epochs);
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    let mut data_cfg = ToyDataConfig::default();
    if let Some(v) = env("N3D") {
        data_cfg.n_3d = v as usize;
    }
    if let Some(v) = env("N2D") {
        data_cfg.n_2d = v as usize;
    }
    if let Some(v) = env("CUE_NOISE") {
        data_cfg.cue_noise = v;
    }
    if let Some(v) = env("CUE_DIM") {
        data_cfg.cue_dim = v as usize;
    }
    if let Some(v) = env("SIGMA") {
        data_cfg.sigma = v;
    }
    if let Some(v) = env("GRID") {
        data_cfg.grid = v as usize;
    }
    if let Some(v) = env("VOLUME") {
        data_cfg.volume = v as usize;
    }
    if let Some(v) = env("MM_PER_VOXEL") {
        data_cfg.mm_per_voxel = v;
    }
    let mut base = TrainConfig {
        epochs,
        ..Default::default()
    };
    if let Some(v) = env("LR") {
        base.learning_rate = v;
    }
    if let Some(v) = env("FINAL_LR") {
        base.final_lr_fraction = v;
    }
    if std::env::var("SGD").is_ok() {
        base.optimizer = hemlets::toy::Optimizer::Sgd;
    }
    if let Some(v) = env("HIDDEN") {
        base.hidden = v as usize;
    }
    if let Some(v) = env("BATCH") {
        base.batch_size = v as usize;
    }
    let alpha = env("ALPHA").unwrap_or(base.alpha);

    let data = ToyDataset::generate(&data_cfg, &canonical_skeleton())?;
    if std::env::var("ORACLE").is_ok() {
        let sk = canonical_skeleton();
        let feats = |s: &hemlets::toy::ToySample| -> Vec<f64> {
            let mut f: Vec<f64> = sk
                .parts()
                .iter()
                .map(|&(p, c)| {
                    if s.pose.coords[p].z > s.pose.coords[c].z {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect();
            f.push(1.0);
            f
        };
        for n_fit in [48usize, 128, 432] {
            let train: Vec<_> = data.train.iter().take(n_fit).collect();
            let x = nalgebra::DMatrix::from_fn(train.len(), 15, |i, j| feats(train[i])[j]);
            let mut err = 0.0;
            let mut cnt = 0.0;
            for j in 0..18 {
                let y = nalgebra::DVector::from_fn(train.len(), |i, _| {
                    train[i].pose.coords[j].z - train[i].pose.coords[0].z
                });
                let coef = (x.transpose() * &x + nalgebra::DMatrix::identity(15, 15) * 1e-3)
                    .lu()
                    .solve(&(x.transpose() * y))
                    .unwrap();
                for s in &data.val {
                    let f = nalgebra::DVector::from_vec(feats(s));
                    err += (f.dot(&coef) - (s.pose.coords[j].z - s.pose.coords[0].z)).abs();
                    cnt += 1.0;
                }
            }
            println!("sign oracle fit on {n_fit}: val z abs err {:.4}", err / cnt);
        }
        return Ok(());
    }
    let start = Instant::now();
    let results: Vec<(u64, f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..seeds)
            .map(|seed| {
                let data = &data;
                s.spawn(move || {
                    let run = |alpha: f64| {
                        let cfg = TrainConfig { seed, alpha, ..base };
                        let run = train_toy(data, &cfg).expect("training");
                        if std::env::var("VERBOSE").is_ok() {
                            for r in &run.log {
                                println!(
                                    "seed {seed} alpha {alpha} epoch {}: hem {:.3} 2d {:.3} 3d {:.3} train {:.4} val {:.4}",
                                    r.epoch,
                                    r.losses.l_hem,
                                    r.losses.l_2d,
                                    r.losses.l_3d,
                                    r.train_mpjpe_voxel.unwrap_or(f64::NAN),
                                    r.val_mpjpe_voxel.unwrap_or(f64::NAN)
                                );
                            }
                        }
                        if std::env::var("AXES").is_ok() {
                            let inputs = ndarray::Array2::from_shape_vec(
                                (data.val.len(), data.val[0].input.len()),
                                data.val.iter().flat_map(|s| s.input.clone()).collect(),
                            )
                            .expect("rows");
                            let pred = run.model.predict(&inputs).expect("predict");
                            let mut err = [0.0; 3];
                            let mut zconst = 0.0;
                            for (i, s) in data.val.iter().enumerate() {
                                let root = s.pose.coords[0];
                                for j in 0..s.pose.coords.len() {
                                    for a in 0..3 {
                                        let p = pred[[i, j, a]] - pred[[i, 0, a]];
                                        let g = s.pose.coords[j][a] - root[a];
                                        err[a] += (p - g).abs();
                                    }
                                    zconst += (s.pose.coords[j][2] - root[2]).abs();
                                }
                            }
                            let n = (data.val.len() * 18) as f64;
                            let tape = hemlets::autodiff::Tape::new();
                            let params: Vec<_> = run.model.params.iter().map(|p| tape.var(p.clone())).collect();
                            let out = run.model.forward(&params, tape.var(inputs.clone().into_dyn())).expect("forward");
                            let hem = out.hem.value();
                            let g2 = data.config.grid * data.config.grid;
                            let sk = canonical_skeleton();
                            let (mut right, mut total) = (0usize, 0usize);
                            for (i, s) in data.val.iter().enumerate() {
                                for (k, &(p, c)) in sk.parts().iter().enumerate() {
                                    let dz = s.pose.coords[p].z - s.pose.coords[c].z;
                                    let mass = |l: usize| -> f64 {
                                        (0..g2).map(|q| hem[[i, (k * 3 + l) * g2 + q]]).sum()
                                    };
                                    let pred = mass(2) > mass(0);
                                    right += (pred == (dz > 0.0)) as usize;
                                    total += 1;
                                }
                            }
                            println!("seed {seed} alpha {alpha}: val polarity accuracy {:.3}", right as f64 / total as f64);
                            println!(
                                "seed {seed} alpha {alpha}: mean abs x {:.4} y {:.4} z {:.4} (zero-depth z {:.4})",
                                err[0] / n, err[1] / n, err[2] / n, zconst / n
                            );
                        }
                        run.final_val_mpjpe().expect("val set")
                    };
                    (seed, run(0.0), run(alpha))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("thread")).collect()
    });
    let mut wins = 0;
    for (seed, b, h) in &results {
        wins += (h < b) as usize;
        println!(
            "seed {seed}: baseline {b:.4}  hemlets {h:.4}  {}",
            if h < b { "win" } else { "loss" }
        );
    }
    println!(
        "hemlets better in {wins}/{seeds} seeds ({:.1}s)",
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
