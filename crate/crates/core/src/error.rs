use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload size mismatch: header declares {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("unknown payload kind `{0}`")]
    UnknownKind(String),

    #[error("invalid label code {0}")]
    InvalidLabel(u8),

    #[error("index {index} out of range for axis of length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("no ICV found")]
    NoIcv,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
