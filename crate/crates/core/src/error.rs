use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SgsError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("estimator: {0}")]
    Estimator(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl SgsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SgsError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SgsError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SgsError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SgsError> = std::result::Result<T, E>;
