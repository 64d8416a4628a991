//! Optional TOML configuration. Flags override file values, which override
//! built-in defaults.
//!
//! ```toml
//! seed = 3
//! threads = 1
//!
//! [encode]
//! grid = 64
//! sigma = 2.0
//!
//! [train]
//! epochs = 40
//! alpha = 0.05
//! ```

use std::path::Path;

use hemlets::heatmap::UnknownPolicy;
use hemlets::metrics::Alignment;
use hemlets::toy::Optimizer;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub encode: EncodeSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSection {
    pub grid: Option<usize>,
    pub sigma: Option<f64>,
    pub volume: Option<usize>,
    pub mm_per_pixel: Option<f64>,
    pub unknown_policy: Option<UnknownPolicy>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub final_lr_fraction: Option<f64>,
    pub optimizer: Option<Optimizer>,
    pub batch_size: Option<usize>,
    pub alpha: Option<f64>,
    pub hidden: Option<usize>,
    pub n_3d: Option<usize>,
    pub n_2d: Option<usize>,
    pub n_val: Option<usize>,
    pub data_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pck_threshold_mm: Option<f64>,
    pub auc_steps: Option<usize>,
    pub alignment: Option<Alignment>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub high_error_rate: Option<f64>,
    pub high_skip_rate: Option<f64>,
    pub low_error_rate: Option<f64>,
    pub low_skip_rate: Option<f64>,
    pub high_above_deg: Option<f64>,
    pub low_below_deg: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Open {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// First of flag, file value and default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
