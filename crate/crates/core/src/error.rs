use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("score {0} lies outside [-1, 1]")]
    ScoreRange(f64),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("vocabulary: {0}")]
    Vocabulary(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("model state: {0}")]
    State(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("non-finite gradient at integration step {step}")]
    Numeric { step: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("incompatible input: {0}")]
    Compatibility(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn validation(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            message: message.into(),
        }
    }
}
