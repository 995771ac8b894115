//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the back-end library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A text record could not be parsed. `line` is 1-based.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// A binary container is malformed or has an unsupported version/type.
    #[error("bad model/container format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("duplicate utterance id {id:?} at record {record}")]
    DuplicateUttId { id: String, record: usize },

    #[error("unknown utterance id {id:?} referenced by trial {trial_index}")]
    UnknownUtterance { id: String, trial_index: usize },

    /// Numerically degenerate input (zero-norm vector, constant cohort, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("matrix is numerically singular: {0}")]
    Singular(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A sampling or fitting request that the data cannot satisfy.
    #[error("infeasible request: {0}")]
    Infeasible(String),

    /// Metrics and losses need both target and nontarget trials.
    #[error("score set contains only one class ({0})")]
    SingleClass(&'static str),

    /// Training produced a non-finite quantity.
    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("solver did not converge after {iters} iterations (gradient norm {grad_norm:.3e})")]
    NotConverged { iters: usize, grad_norm: f64 },

    /// Numerical breakdown of an otherwise well-posed computation.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
