use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}
