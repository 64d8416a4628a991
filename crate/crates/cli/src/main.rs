//! `hemlets` command-line tool.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical
//! failure, 4 I/O failure.

mod commands;
mod config;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hemlets::heatmap::UnknownPolicy;
use hemlets::metrics::Alignment;
use hemlets::toy::Optimizer;

use crate::config::FileConfig;
use crate::error::CliError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "hemlets", version, about = "Part-centric heatmap triplets for 3D human pose")]
struct Cli {
    /// TOML file with defaults for any subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random choice.
    #[arg(long, global = true, env = "HEMLETS_SEED")]
    seed: Option<u64>,

    /// Worker threads for batch work; outputs do not depend on it.
    #[arg(long, global = true, env = "HEMLETS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render HEMlets, 2D and volumetric targets for a pose file.
    Encode(EncodeArgs),
    /// Read part polarities back out of an encoded container.
    Decode(DecodeArgs),
    /// Train the toy regressor on a synthetic dataset.
    TrainToy(TrainArgs),
    /// Score predicted poses against ground truth.
    Eval(EvalArgs),
    /// Simulate forward/backward annotations from 3D poses.
    SimulateFbi(SimulateArgs),
    /// Turn pairwise ordinal depth annotations into per-part labels.
    ConvertOrdinal(ConvertArgs),
    /// Write grayscale images and stick figures from a container.
    Dump(DumpArgs),
    /// Pose and shape the body model and write an OBJ mesh.
    Skin(SkinArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    KeepParent,
    MaskAll,
}

impl From<PolicyArg> for UnknownPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::KeepParent => UnknownPolicy::KeepParent,
            PolicyArg::MaskAll => UnknownPolicy::MaskAll,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlignmentArg {
    Similarity,
    Rigid,
}

impl From<AlignmentArg> for Alignment {
    fn from(a: AlignmentArg) -> Self {
        match a {
            AlignmentArg::Similarity => Alignment::Similarity,
            AlignmentArg::Rigid => Alignment::Rigid,
        }
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Pose file (`hemlets.poses`, millimetres).
    #[arg(long)]
    input: PathBuf,
    /// Output container.
    #[arg(long)]
    output: PathBuf,
    /// Heatmap side length in pixels [default: 64].
    #[arg(long)]
    grid: Option<usize>,
    /// Gaussian width in pixels [default: 2].
    #[arg(long)]
    sigma: Option<f64>,
    /// Volumetric target side length in voxels [default: 16].
    #[arg(long)]
    volume: Option<usize>,
    /// Millimetres per heatmap pixel [default: 37.5].
    #[arg(long)]
    mm_per_pixel: Option<f64>,
    /// Masking of parts whose depth order is unknown [default: keep-parent].
    #[arg(long, value_enum)]
    unknown_policy: Option<PolicyArg>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Container written by `encode`.
    #[arg(long)]
    input: PathBuf,
    /// Output polarity file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output model container.
    #[arg(long)]
    output: PathBuf,
    /// Per-epoch log, one JSON object per line.
    #[arg(long)]
    log: PathBuf,
    /// Passes over the training set.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate; 0 freezes the model.
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Final learning rate as a fraction of the initial one.
    #[arg(long)]
    final_lr: Option<f64>,
    /// Update rule.
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Samples per update.
    #[arg(long)]
    batch: Option<usize>,
    /// Weight of the intermediate heatmap losses.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Width of the hidden layers.
    #[arg(long)]
    hidden: Option<usize>,
    /// Fully 3D training samples.
    #[arg(long = "n-3d")]
    n_3d: Option<usize>,
    /// Training samples with simulated ordinal labels only.
    #[arg(long = "n-2d")]
    n_2d: Option<usize>,
    /// Validation samples.
    #[arg(long)]
    n_val: Option<usize>,
    /// Seed of the synthetic dataset.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted poses.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth poses, paired with `--pred` by position.
    #[arg(long)]
    gt: PathBuf,
    /// PCK threshold and AUC range in millimetres [default: 150].
    #[arg(long)]
    pck_threshold: Option<f64>,
    /// AUC threshold grid size [default: 31].
    #[arg(long)]
    auc_steps: Option<usize>,
    /// Transform fitted before PA-MPJPE [default: similarity].
    #[arg(long, value_enum)]
    alignment: Option<AlignmentArg>,
    /// Also report metrics per ground-truth `group`.
    #[arg(long)]
    by_group: bool,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Ground-truth 3D poses.
    #[arg(long)]
    input: PathBuf,
    /// Output annotation file (`hemlets.fbi`).
    #[arg(long)]
    output: PathBuf,
    /// Error rate above the high tilt bound [default: 0.074].
    #[arg(long)]
    high_error: Option<f64>,
    /// Skip rate above the high tilt bound [default: 0.09].
    #[arg(long)]
    high_skip: Option<f64>,
    /// Error rate below the low tilt bound [default: 0.20].
    #[arg(long)]
    low_error: Option<f64>,
    /// Skip rate below the low tilt bound [default: 0.25].
    #[arg(long)]
    low_skip: Option<f64>,
    /// High tilt bound in degrees [default: 30].
    #[arg(long)]
    high_above: Option<f64>,
    /// Low tilt bound in degrees [default: 20].
    #[arg(long)]
    low_below: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Ordinal annotation file (`hemlets.ordinal`).
    #[arg(long)]
    input: PathBuf,
    /// Output annotation file (`hemlets.fbi`).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    /// Container to dump.
    #[arg(long)]
    input: PathBuf,
    /// Directory for the images and OBJ files; created if missing.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SkinArgs {
    /// JSON with `beta` (10 numbers) and `theta` (24 axis-angle triples);
    /// both default to zero.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Rig container; the built-in synthetic rig when absent.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Output mesh.
    #[arg(long)]
    output: PathBuf,
    /// Also write the posed skeleton as canonical-joint stick figure.
    #[arg(long)]
    skeleton: Option<PathBuf>,
    /// Write the rig in use to a container.
    #[arg(long)]
    export_rig: Option<PathBuf>,
}

/// Settings shared by every subcommand.
pub struct Globals {
    pub file: FileConfig,
    pub seed: u64,
    pub threads: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = config::pick(cli.seed, file.seed, 0);
    let threads = config::pick(cli.threads, file.threads, 1);
    if threads == 0 {
        return Err(CliError::Config("threads must be at least 1".into()));
    }
    let globals = Globals { file, seed, threads };
    match cli.command {
        Command::Encode(a) => commands::encode::run(&a, &globals),
        Command::Decode(a) => commands::encode::decode(&a),
        Command::TrainToy(a) => commands::train::run(&a, &globals),
        Command::Eval(a) => commands::eval::run(&a, &globals),
        Command::SimulateFbi(a) => commands::annotate::simulate(&a, &globals),
        Command::ConvertOrdinal(a) => commands::annotate::convert(&a),
        Command::Dump(a) => commands::dump::run(&a),
        Command::Skin(a) => commands::skin::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
