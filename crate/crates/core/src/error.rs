use thiserror::Error;

/// Errors produced by the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("transport error after {written} of {total} bytes: {source}")]
    Transport {
        written: usize,
        total: usize,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
