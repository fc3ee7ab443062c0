use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LestError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "malformed file {path}: {len} bytes is not a multiple of the {record}-byte record size"
    )]
    MalformedFile {
        path: PathBuf,
        len: u64,
        record: usize,
    },

    #[error("invalid data at record {index}: {message}")]
    Data { index: usize, message: String },

    /// A caller broke a documented precondition (shape, range, length).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("zero attention denominator at query row {row}")]
    ZeroDenominator { row: usize },

    #[error("oracle precondition failed: similarity({query}, {key}) = {value} is not positive")]
    OraclePrecondition {
        query: usize,
        key: usize,
        value: f64,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("config error at line {line}: key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    /// Something that cannot happen by construction did.
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl LestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LestError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        LestError::Contract(msg.into())
    }
}
