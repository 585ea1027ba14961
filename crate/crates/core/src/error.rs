use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: row {row}: {message}")]
    InvalidRow {
        path: PathBuf,
        row: u64,
        message: String,
    },

    #[error("{path}: duplicate hadm_id {hadm_id} at row {row}")]
    DuplicateAdmission { path: PathBuf, hadm_id: u64, row: u64 },

    #[error("no admission carries ICD code `{0}`")]
    NoIcdMatch(String),

    #[error("median of an empty sequence")]
    EmptyMedian,

    #[error("admission {0} not found in its subject history")]
    AdmissionNotInHistory(u64),

    #[error("note for hadm_id {note} given to grid of hadm_id {grid}")]
    MismatchedNote { grid: u64, note: u64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("store format: {0}")]
    StoreFormat(String),

    #[error("missing embedding for hadm_id {hadm_id}, category {category}, day {day}")]
    MissingEmbedding { hadm_id: u64, category: u8, day: u8 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty training batch")]
    EmptyBatch,

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("analysis: {0}")]
    Analysis(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
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
