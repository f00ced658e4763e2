use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("timestep {t} outside [{min}, {max}]")]
    Timestep { t: usize, min: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown condition id {0}")]
    Condition(usize),

    #[error("bad container {path}: {reason}")]
    BadContainer { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("kv cache error: {0}")]
    Cache(String),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn bad_container(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::BadContainer { path: path.into(), reason: reason.into() }
    }
}
