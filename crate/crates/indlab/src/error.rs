//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter or configuration value failed validation.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Divergence, non-finite values, or an exhausted integration horizon.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A binary file did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
