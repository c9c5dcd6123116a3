use std::io;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("model mismatch: file was written by model {expected:016x}, supplied model is {found:016x}")]
    ModelMismatch { expected: u64, found: u64 },
    #[error("missing checkpoints for gamma {}", .0.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(", "))]
    MissingCheckpoints(Vec<usize>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
