use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument ({detail})")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("parameter `{0}` is not on the tape")]
    ParamNotOnTape(String),

    #[error("gradient requested for a non-scalar loss of shape {0:?}")]
    NotScalar(Vec<usize>),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::InvalidArgument { op, detail: detail.into() }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Errors from model construction, persistence and the training harness.
#[derive(Debug, Error)]
pub enum VtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("image: {0}")]
    Image(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model has no tokenizer emitting attention maps")]
    NoAttention,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
