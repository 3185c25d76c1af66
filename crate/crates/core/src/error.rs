use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition (bad sizes, out-of-range values).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data violates an invariant (non-finite coordinates, NaN flow).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file does not conform to its declared format (bad magic, version, CRC, shapes).
    #[error("format error: {0}")]
    Format(String),

    /// A numeric failure at runtime (NaN loss, diverged optimizer, failed gradient check).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
