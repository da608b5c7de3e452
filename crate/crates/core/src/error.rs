use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    WriteAt { offset: u64, source: io::Error },

    #[error("i/o error on {path}: {source}")]
    Path { path: String, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated {what}: expected {expected} bytes, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at data index {index}")]
    Data { index: usize, value: f32 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity error: budget S={budget} cannot hold {tasks} tasks (per-task budget would be 0)")]
    Capacity { budget: usize, tasks: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure in {module} at position {position}: {detail}")]
    Numeric {
        module: &'static str,
        position: usize,
        detail: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn path(path: &std::path::Path, source: io::Error) -> Self {
        Error::Path {
            path: path.display().to_string(),
            source,
        }
    }
}
