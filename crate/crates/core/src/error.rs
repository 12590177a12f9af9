use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("point {point:?} lies outside {domain}")]
    OutOfDomain {
        point: [f64; 3],
        domain: &'static str,
    },

    #[error("ray misses the volume; no samples to take")]
    EmptySamples,

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{path}: size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: unsupported {field} {found} (supported: {supported})")]
    Unsupported {
        path: PathBuf,
        field: &'static str,
        found: String,
        supported: String,
    },

    #[error("{path}: malformed field `{field}`: {reason}")]
    Format {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("measured intensity {value} at index {index} is not positive; log undefined")]
    Domain { index: usize, value: f64 },

    #[error("non-finite loss at {stage} {step}")]
    Divergence { stage: &'static str, step: usize },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
