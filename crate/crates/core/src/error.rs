//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by kernels, data generation, the network and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("observation error: {0}")]
    Observation(String),
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable class name, stable across releases.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::Spec(_) => "spec",
            Error::Format(_) => "format",
            Error::Truncated(_) => "truncated",
            Error::Observation(_) => "observation",
            Error::DegenerateShape(_) => "degenerate_shape",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
