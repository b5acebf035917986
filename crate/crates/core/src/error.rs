use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index {index} out of range for table with {rows} rows")]
    Index { index: usize, rows: usize },

    #[error("attention row {row} has every key masked out")]
    DegenerateAttention { row: usize },

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("backward already ran on this graph; build a new graph to differentiate again")]
    BackwardTwice,

    #[error("sequence of length {len} exceeds positional capacity {capacity}")]
    Length { len: usize, capacity: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
