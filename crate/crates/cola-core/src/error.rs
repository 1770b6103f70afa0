use thiserror::Error;

/// Errors surfaced by tensor ops, adapter construction, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes. The message names both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (rank too large, unknown activation, bad preset...).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: a precondition that is the caller's responsibility.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
