use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad category of a failure, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters or arguments supplied by the caller.
    Usage,
    /// Input data that is missing, malformed, or unsuitable.
    Data,
    /// A numerical procedure failed to converge or produced non-finite values.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0}")]
    Triplets(String),

    #[error("need at least {needed} examples (got {got})")]
    TooFewExamples { needed: usize, got: usize },

    #[error("triplet {position}: index {index} out of range for {n} examples")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        n: usize,
    },

    #[error("stationary distribution did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("retraction undefined: smallest singular value {min_singular:e}")]
    RetractionUndefined { min_singular: f64 },

    #[error("line search failed at iteration {iteration} (cost {cost}, slope {slope:e})")]
    LineSearchFailed {
        iteration: usize,
        cost: f64,
        slope: f64,
    },

    #[error("non-finite cost at iteration {iteration}: {detail}")]
    NonFiniteCost { iteration: usize, detail: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parameter(_) => ErrorKind::Usage,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::NonFinite { .. }
            | Error::EmptyDataset
            | Error::Dimension(_)
            | Error::Triplets(_)
            | Error::TooFewExamples { .. }
            | Error::IndexOutOfRange { .. } => ErrorKind::Data,
            Error::NotConverged { .. }
            | Error::RetractionUndefined { .. }
            | Error::LineSearchFailed { .. }
            | Error::NonFiniteCost { .. } => ErrorKind::Numerical,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
