use crate::tensor::TensorError;

/// Errors surfaced by the pipelines, file formats and training harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Tensor(TensorError::Contract(msg.into()))
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Tensor(TensorError::Dimension(msg.into()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
