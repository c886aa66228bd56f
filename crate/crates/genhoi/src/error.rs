use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("invalid split request: {0}")]
    Split(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding provider failed on prompt {prompt:?}: {reason}")]
    Provider { prompt: String, reason: String },

    #[error("malformed embedding file {path}: {reason}")]
    EmbeddingFile { path: PathBuf, reason: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined cosine similarity: zero-norm query feature")]
    ZeroNorm,

    #[error("non-finite cost matrix entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
