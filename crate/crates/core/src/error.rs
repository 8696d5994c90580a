use thiserror::Error;

/// Errors produced by dataset loading, model evaluation, training, and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum CfqError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("run error: {0}")]
    Run(String),
}

impl CfqError {
    pub fn schema(msg: impl Into<String>) -> Self {
        CfqError::Schema(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CfqError::Data(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CfqError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CfqError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CfqError>;
