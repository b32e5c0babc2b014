use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Bad magic, version or header dictionary in a tensor file.
    #[error("format error: {0}")]
    Format(String),

    /// Payload length disagrees with the declared shape.
    #[error("corrupt tensor: {0}")]
    Corruption(String),

    /// Well-formed data that violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown scene id `{0}`")]
    UnknownScene(String),

    #[error("memory bank error: {0}")]
    Bank(String),

    #[error("region feature error: {0}")]
    Feature(String),

    #[error("gating error: {0}")]
    Gate(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
