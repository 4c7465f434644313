//! Error taxonomy shared across the crate.
//!
//! Validation, format, corruption, shape, and config-mismatch errors all map
//! to CLI exit code 2; numerical aborts map to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a precondition (bad argument, out-of-range value).
    #[error("validation error: {0}")]
    Validation(String),

    /// A patch file header is malformed (bad magic, unknown kind byte).
    #[error("format error: {0}")]
    Format(String),

    /// File contents disagree with their own header (truncation, impossible shape).
    #[error("corruption error: {0}")]
    Corruption(String),

    /// Tensor shapes are inconsistent with the declared architecture.
    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint or data does not match the active configuration.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// Non-finite values encountered during training or inference.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
