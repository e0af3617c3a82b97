use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed annotation or candidate file. `line` is 1-based when known.
    #[error("parse error in {path} (line {line:?}, field `{field}`): {message}")]
    Parse {
        path: PathBuf,
        line: Option<u64>,
        field: String,
        message: String,
    },

    #[error("points out of image bounds at indices {indices:?}")]
    OutOfBounds { indices: Vec<usize> },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("k-means needs at least {k} points, got {available}; fall back to a uniform layout")]
    TooFewPoints { k: usize, available: usize },

    #[error("brute-force matching supports min(n, m) <= {limit}, got {actual}")]
    TooLarge { limit: usize, actual: usize },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite { what: what.into() }
    }
}
