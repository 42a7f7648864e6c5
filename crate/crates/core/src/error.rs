use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("bit matrix entry ({row}, {col}) is {value}, expected 0 or 1")]
    InvalidBit { row: usize, col: usize, value: u8 },
    #[error("prior probability {value} at ({row}, {col}) is outside [0, 1]")]
    PriorOutOfRange { row: usize, col: usize, value: f64 },
    #[error("exhaustive search over {candidates} candidates exceeds the limit of {limit}")]
    SearchSpaceTooLarge { candidates: u128, limit: u64 },
    #[error("non-finite activation in {layer}: {source}")]
    NonFiniteActivation {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("training aborted at step {step}: loss is not finite")]
    NonFiniteLoss { step: usize },
    #[error("unknown constellation `{0}`")]
    UnknownConstellation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
