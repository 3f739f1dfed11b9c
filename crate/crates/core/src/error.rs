use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::pool::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{field} of {len} bytes exceeds the 2^32-1 byte encoding limit")]
    EncodingLimit { field: &'static str, len: usize },

    #[error("record key must be non-empty")]
    EmptyKey,

    #[error("corrupt frame at byte offset {offset}: {reason}")]
    CorruptFrame { offset: u64, reason: String },

    #[error("sort violation at record {index}: {prev} > {next}")]
    SortViolation {
        index: u64,
        prev: String,
        next: String,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("task {task} failed on input key {key:?}: {source}")]
    Callback {
        task: TaskId,
        key: String,
        #[source]
        source: anyhow::Error,
    },

    #[error("task {task} failed: {reason}")]
    TaskFailed { task: TaskId, reason: String },

    #[error("invalid job spec: {0}")]
    InvalidSpec(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("store at {0} is dirty after a failed flush; reopen it")]
    StoreDirty(PathBuf),

    #[error("checkpoint {iteration} rejected: {reason}")]
    CheckpointRejected { iteration: usize, reason: String },

    #[error("iteration diverged: L1 delta grew for {patience} consecutive iterations (trace {trace:?})")]
    Diverged { patience: usize, trace: Vec<f64> },

    #[error("no healthy worker left to run partition {0}")]
    NoHealthyWorker(usize),

    #[error("injected crash: {0}")]
    InjectedCrash(String),

    #[error("metadata error: {0}")]
    Metadata(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(offset: u64, reason: impl Into<String>) -> Self {
        Error::CorruptFrame {
            offset,
            reason: reason.into(),
        }
    }
}

/// Attaches a path to `io::Error`s.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
