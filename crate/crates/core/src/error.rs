use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("column `{0}` is constant on the training rows")]
    ConstantColumn(String),

    #[error("cannot normalise weights: every likelihood is zero")]
    ZeroLikelihood,

    #[error("non-finite log posterior at initialisation")]
    NonFiniteLogPosterior,

    #[error("kernel matrix is singular even with jitter {jitter:e}")]
    SingularKernel { jitter: f64 },

    #[error("split {split} (seed {seed}) failed: {source}")]
    Split {
        split: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
