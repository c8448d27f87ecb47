//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {op}: {details}")]
    Shape { op: String, details: String },

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("training error: {0}")]
    Train(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            details: details.into(),
        }
    }
}
