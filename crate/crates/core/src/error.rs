use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("partition infeasible: could not give every device at least {min_per_client} samples after {retries} attempts")]
    InfeasiblePartition { min_per_client: usize, retries: usize },

    #[error("training diverged in round {round}{}: {reason}", .device.map(|d| format!(" on device {d}")).unwrap_or_default())]
    Divergence {
        round: usize,
        /// `None` when the global model itself is found non-finite.
        device: Option<usize>,
        reason: String,
    },

    #[error("matrix is numerically singular ({0}); increase the ridge")]
    Singular(String),

    #[error("zero-norm row {0} cannot be normalized")]
    ZeroNormRow(usize),

    #[error("{0} is not supported by this task")]
    Unsupported(&'static str),

    #[error("malformed input {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
