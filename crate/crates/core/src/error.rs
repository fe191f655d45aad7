use thiserror::Error;

/// Errors raised by the library.
///
/// Variants fall into three families that the CLI maps onto exit codes:
/// invalid input data, numerical-domain failures and combinatorial refusals.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for a set of {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("matrix is indefinite (smallest eigenvalue {min_eigenvalue:e})")]
    Indefinite { min_eigenvalue: f64 },

    #[error("matrix is singular and jitter up to {max_jitter:e} did not help")]
    Singular { max_jitter: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("refusing exhaustive search over {n} candidates (limit {n_max})")]
    TooLarge { n: usize, n_max: usize },

    #[error("scene generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the numerical domain (indefinite or singular
    /// matrices, non-finite values) as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Indefinite { .. } | Error::Singular { .. } | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
