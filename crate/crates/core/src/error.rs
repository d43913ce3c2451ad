use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header in {kind} file: expected `{expected}`, found `{found}`")]
    MalformedHeader {
        kind: &'static str,
        expected: String,
        found: String,
    },
    #[error("line {line}: {reason}")]
    RowParse { line: u64, reason: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: u64, key: String },
    #[error("line {line}: transmit power must be strictly positive")]
    NonPositivePower { line: u64 },
    #[error("unknown cell `{0}`")]
    UnknownCell(String),
    #[error("stream is empty")]
    EmptyStream,
    #[error("training data contains fewer than two classes")]
    SingleClassData,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("stream for user `{0}` has no GPS fixes")]
    NoGps(String),
    #[error("no labeled record pairs available for calibration")]
    NoLabeledData,
    #[error("total weight is zero")]
    ZeroTotalWeight,
    #[error("no labeled users available for parameter fitting")]
    NoLabeledUsers,
    #[error("no users with both anchors inside mapped districts")]
    NoUsers,
    #[error("expected value is zero at cell {index}")]
    ZeroExpectedCell { index: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid region grid: {0}")]
    InvalidGrid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn row(line: u64, reason: impl Into<String>) -> Self {
        Error::RowParse {
            line,
            reason: reason.into(),
        }
    }

    /// Whether the error was caused by input data rather than by a bug.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::DimensionMismatch { .. })
    }
}
