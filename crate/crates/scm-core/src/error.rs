//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScmError {
    /// A matrix or buffer had the wrong shape. Carries what was expected and
    /// what was actually seen.
    #[error("{context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// A scalar or configuration value violated an invariant.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input contained NaN or infinity where finite values are required.
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    /// Cholesky factorization failed; the matrix named in the message is
    /// expected to be symmetric positive definite.
    #[error("{0} not positive definite")]
    NotPositiveDefinite(String),

    /// A linear system had no usable solution.
    #[error("{0}")]
    SingularSystem(String),

    /// Symmetric eigendecomposition did not converge.
    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    /// Failure inside a named solver phase.
    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<ScmError>,
    },

    /// Malformed input file; `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ScmError {
    pub(crate) fn dim(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        ScmError::DimensionMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Tag an error with the solver phase it came from.
    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        ScmError::Phase {
            phase,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, ScmError>;
