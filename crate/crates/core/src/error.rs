//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geo id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("timestamps out of order: {now} precedes {prev}")]
    Ordering { now: i64, prev: i64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint version error: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint manifest error: {0}")]
    CheckpointManifest(String),

    #[error("checkpoint shape error: {0}")]
    CheckpointShape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
