use thiserror::Error;

/// Library-wide error type.
///
/// The CLI maps these onto exit codes: validation-class errors
/// ([`Error::Dimension`], [`Error::Domain`], [`Error::Validation`],
/// [`Error::Parse`]) exit with 2, numerical failures
/// ([`Error::NotPositiveDefinite`], [`Error::Rank`], [`Error::Numerical`])
/// with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Cholesky factorization failed even after the one-time jitter retry.
    #[error("matrix `{name}` is not positive definite")]
    NotPositiveDefinite { name: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Every violated invariant found by `model::validate`, one per line.
    #[error("validation failed:\n{}", issues.join("\n"))]
    Validation { issues: Vec<String> },

    #[error("rank-deficient design: {0}")]
    Rank(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
