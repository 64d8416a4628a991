use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hemlets::Error;
use thiserror::Error as ThisError;

/// Failures surfaced by a subcommand, each tied to a stable exit code.
#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: Error },

    #[error("{0}")]
    Library(#[from] Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: std::io::Error },
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

fn library_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. }
        | Error::TrainingDiverged { .. }
        | Error::AlignmentDegenerate
        | Error::ScalingUndefined => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_INPUT,
    }
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Input { source, .. } | CliError::Library(source) => library_code(source),
            CliError::Config(_) => EXIT_INPUT,
            CliError::Io { .. } => EXIT_IO,
            // A missing input file is bad input, not a failing disk.
            CliError::Open { .. } => EXIT_INPUT,
        })
    }
}

/// Attaches a path to library errors raised while reading it.
pub trait WithPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> WithPath<T> for hemlets::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|source| match source {
            Error::Io(source) => CliError::Io {
                path: path.to_path_buf(),
                source,
            },
            source => CliError::Input {
                path: path.to_path_buf(),
                source,
            },
        })
    }
}
