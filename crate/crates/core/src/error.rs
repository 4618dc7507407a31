use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid moment: {0}")]
    InvalidMoment(String),

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("validation error in sample {id}: {message}")]
    Validation { id: String, message: String },

    #[error("matching error: {0}")]
    Matching(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
