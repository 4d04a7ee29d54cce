use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("signature capacity of {capacity} insertions exceeded")]
    Capacity { capacity: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error("trace parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("scheduling error: {0}")]
    Schedule(String),
    #[error("simulation deadlock at cycle {cycle}: {dump}")]
    Deadlock { cycle: u64, dump: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
