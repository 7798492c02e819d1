use thiserror::Error;

/// Failures raised by tensor construction and taped operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("slice {start}..{end} out of range for extent {extent}")]
    SliceOutOfRange {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("division by an exact zero")]
    DivisionByZero,
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss variable belongs to a different tape")]
    Detached,
    #[error("backward already ran on this tape; clear it before reuse")]
    AlreadyBackpropagated,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("bisection failed to bracket a root: {0}")]
    Bracketing(String),
    #[error("non-finite loss at epoch {epoch} for M = {mobility}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        mobility: f64,
        detail: String,
    },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
