use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::dataset::DatasetError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GatError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite value in parameter {param} at update {step} (epoch {epoch})")]
    NumericalAbort {
        param: String,
        step: usize,
        epoch: usize,
    },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GatError> = std::result::Result<T, E>;
