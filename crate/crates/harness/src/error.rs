use ashnet_core::CoreError;
use ashnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(CoreError::Config(_)) => 2,
            HarnessError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
