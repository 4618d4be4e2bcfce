use thiserror::Error;

use crate::optimizer::TraceEntry;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: [usize; 3], found: [usize; 3] },

    #[error("foreground is empty; threshold needs at least one voxel with positive intensity")]
    DegenerateForeground,

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("landmark ids do not match (only in first: {only_in_first:?}, only in second: {only_in_second:?})")]
    LandmarkMismatch { only_in_first: Vec<u32>, only_in_second: Vec<u32> },

    #[error("optimization diverged at level {level}, iteration {iteration}: {reason}")]
    Diverged { level: usize, iteration: usize, reason: String, trace: Vec<TraceEntry> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
