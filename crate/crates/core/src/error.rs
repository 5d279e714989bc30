use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("empty batch")]
    EmptyBatch,

    #[error("no tokens")]
    NoTokens,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: empty split")]
    EmptySplit { path: PathBuf },

    #[error("{path}: {bad} of {total} lines malformed (first: line {first_line}: {first_reason})")]
    TooManyMalformed {
        path: PathBuf,
        bad: usize,
        total: usize,
        first_line: usize,
        first_reason: String,
    },

    #[error("missing split: {0}")]
    MissingSplit(&'static str),

    #[error("embedding dimension mismatch: file has {found}, model expects {expected}")]
    EmbeddingDim { expected: usize, found: usize },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("vocabulary hash mismatch: checkpoint {expected}, vocabulary {found}")]
    VocabHashMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
