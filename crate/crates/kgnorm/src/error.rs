//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by ingestion, tokenization, training, and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty dictionary: {0}")]
    EmptyDictionary(PathBuf),

    #[error("unknown concept id {0:?}")]
    UnknownConcept(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("gold concept(s) missing from index: {0}")]
    MissingGold(String),

    #[error("zero-norm embedding for term {0:?}")]
    ZeroNorm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class: 1 for input/validation errors, 2 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::EmptyDictionary(_)
            | Error::UnknownConcept(_)
            | Error::InvalidInput(_)
            | Error::InvalidConfig(_)
            | Error::MissingGold(_) => 1,
            Error::Shape(_)
            | Error::NonFinite(_)
            | Error::Checkpoint { .. }
            | Error::ZeroNorm(_)
            | Error::Io(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
