use thiserror::Error;

#[derive(Debug, Error)]
pub enum FbsError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error("statistics: {0}")]
    Stats(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FbsError>;

impl FbsError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        FbsError::InvalidInput(msg.into())
    }

    pub fn stats(msg: impl Into<String>) -> Self {
        FbsError::Stats(msg.into())
    }
}
