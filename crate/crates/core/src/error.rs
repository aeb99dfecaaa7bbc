use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("missing embedding for id {0:?}")]
    MissingEmbedding(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid vector for id {id:?}: {reason}")]
    InvalidVector { id: String, reason: String },

    #[error("cannot select {k} examples from {available} candidates")]
    TooFewCandidates { k: usize, available: usize },

    #[error("unknown case id {0:?}")]
    UnknownCase(String),

    #[error("case {id:?} has no {field}")]
    MissingField { id: String, field: &'static str },

    #[error("inconsistent demonstration state: {0}")]
    InconsistentState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("generator request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("generator transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("generator returned an empty completion")]
    EmptyCompletion,

    #[error("too many generator failures: {skipped} of {total} cases skipped")]
    TooManyFailures { skipped: usize, total: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn record(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Record {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
