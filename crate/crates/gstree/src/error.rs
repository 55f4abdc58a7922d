//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Bad configuration (out-of-range hyperparameter, inconsistent spec).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data / model files.
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged or produced a non-finite loss.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Model file carries a format version this build does not understand.
    #[error("unsupported model format version {found:?} (expected {expected:?})")]
    UnsupportedVersion { found: String, expected: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
