use thiserror::Error;

/// Errors produced by the hemlets library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("joint {joint} is not valid in this pose")]
    InvalidJoint { joint: usize },

    #[error("part {part} has zero length")]
    DegeneratePart { part: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    Dimension { expected: Vec<usize>, actual: Vec<usize> },

    #[error("expected a scalar sink, got shape {shape:?}")]
    Rank { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("polarity of part {part} cannot be decoded: {reason}")]
    UnknownPolarity { part: usize, reason: &'static str },

    #[error("metric scaling undefined: no valid part with positive length")]
    ScalingUndefined,

    #[error("no jointly valid joints to evaluate")]
    EmptyEvaluation,

    #[error("alignment is degenerate (fewer than 3 non-collinear joints)")]
    AlignmentDegenerate,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("model is not ready: {0}")]
    NotReady(&'static str),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingDiverged { epoch: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("container format error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dimension(expected: &[usize], actual: &[usize]) -> Self {
        Error::Dimension {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
