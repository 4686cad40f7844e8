use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid dialogue {dialogue}: {message}")]
    InvalidDialogue { dialogue: String, message: String },

    #[error("invalid frame {frame} in dialogue {dialogue}: {message}")]
    InvalidFrame {
        dialogue: String,
        frame: usize,
        message: String,
    },

    #[error("overlapping spans: {0}")]
    OverlappingSpans(String),

    #[error("unknown role {0:?}")]
    UnknownRole(String),

    #[error("width mismatch in {context}: expected {expected}, got {actual}")]
    WidthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("sequence of length {len} exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("empty pool: {0}")]
    EmptyPool(&'static str),

    #[error("no targets defined for the {0} objective")]
    NoTargets(&'static str),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("missing prerequisite checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn record(path: &std::path::Path, line: usize, message: impl Into<String>) -> Self {
        Error::Record {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}
