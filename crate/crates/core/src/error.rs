use jant_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Dimension(m) => Error::Dimension(m),
            TensorError::Config(m) => Error::Config(m),
            TensorError::Usage(m) => Error::Usage(m),
            TensorError::NonFinite(m) => Error::Divergence(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
