use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// NIG parameters outside `gamma > 0, alpha > 1, beta > 0` or non-finite.
    #[error("parameter domain violation: {0}")]
    Domain(String),
    /// An intermediate quantity overflowed or became non-finite.
    #[error("numeric range error: {0}")]
    NumericRange(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    /// Bad configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
