use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file length {len} is not a multiple of {record} bytes")]
    RecordLength {
        path: PathBuf,
        len: u64,
        record: u64,
    },
    #[error("label count {labels} does not match point count {points}")]
    LabelCount { labels: usize, points: usize },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("coordinate sets differ: {0}")]
    CoordMismatch(String),
    #[error("class id {id} out of range for {num_classes} classes")]
    ClassOutOfRange { id: u32, num_classes: usize },
    #[error("no labeled points")]
    NoLabels,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
