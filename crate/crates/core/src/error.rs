use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in tensor {tensor}")]
    NonFinite { tensor: usize },

    #[error("{path}: {msg}")]
    Idx { path: PathBuf, msg: String },

    #[error("sample pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("malformed model encoding: {0}")]
    Codec(String),

    #[error("line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing value for source {0}")]
    MissingSource(u64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
