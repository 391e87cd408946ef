//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by solvers, generators and IO routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The completion problem has no usable data (e.g. an empty mask, or a
    /// row/column left without observations after outlier removal).
    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    /// A sampling verification step failed after the retry budget.
    #[error("infeasible sampling: {0}")]
    InfeasibleSampling(String),

    /// A simulation or CLI configuration is inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The iterative SVD failed to reach the requested accuracy.
    #[error("truncated SVD did not converge after {iterations} iterations")]
    SvdNoConvergence { iterations: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file could not be parsed (MatrixMarket, CSV or config).
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
