use std::path::PathBuf;

use duq_diff::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },

    #[error("line {line}: unknown station id {station} (expected 0..{stations})")]
    UnknownStation { line: u64, station: usize, stations: usize },

    #[error("series has no observed values")]
    AllMissing,

    #[error("date {date_id} has an incomplete hour grid")]
    IncompleteGrid { date_id: usize },

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Container { path: PathBuf, message: String },

    #[error("id {id} out of range for {what} (size {size})")]
    IdOutOfRange { what: &'static str, id: f64, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("{0}")]
    Degenerate(String),

    #[error("evaluation inputs are misaligned; missing cells: {0}")]
    Misaligned(String),

    #[error("z must lie strictly between 0 and 1, got {0}")]
    InvalidZ(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
