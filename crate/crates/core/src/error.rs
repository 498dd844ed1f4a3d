use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("line {line}: expected {expected} components, got {actual}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        actual: usize,
    },

    #[error("embedding table is empty")]
    EmptyTable,

    #[error("token {0:?} is not in the embedding table")]
    MissingToken(String),

    #[error("token {0:?} has an all-zero vector")]
    ZeroVector(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("video {0:?} has no reference captions")]
    NoReferences(String),

    #[error("no reference set for video {0:?}")]
    MissingReference(String),

    #[error("video {0:?}: mean reference length must be positive")]
    ZeroLength(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid features: {0}")]
    Features(String),

    #[error("model: {0}")]
    Model(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Autodiff(#[from] hrig_autodiff::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
