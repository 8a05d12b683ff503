use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("softmax row has no unmasked position")]
    AllMasked,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("token-specific parameter count mismatch: expected {expected} NS tokens, got {actual}")]
    NsCountMismatch { expected: usize, actual: usize },

    #[error("retained query count {retained} outside [{min}, {max}]")]
    RetainedOutOfRange {
        retained: usize,
        min: usize,
        max: usize,
    },

    #[error("backward called without saved activations: {0}")]
    MissingActivations(&'static str),

    #[error("no stage-1 state for user {user} and request {request}")]
    MissingStageOne { user: String, request: String },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn tokenizer(msg: impl Into<String>) -> Self {
        Error::Tokenizer(msg.into())
    }
}
