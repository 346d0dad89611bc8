use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// A loss or activation became NaN or infinite.
    #[error("non-finite value at {context}")]
    NonFinite { context: String },
    #[error("degenerate hull: {0}")]
    DegenerateHull(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// Malformed input file (PPM, JSON sidecar, checkpoint).
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
