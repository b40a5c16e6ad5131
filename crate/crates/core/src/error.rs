use ashnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl From<CoreError> for TensorError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        }
    }
}
