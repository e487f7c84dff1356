use alloc::string::String;

/// Why a policy-induced chain failed the ergodicity test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErgodicityFailure {
    /// Some state cannot reach (or be reached from) the rest of the chain.
    Reducible { unreachable_state: usize },
    /// The chain is irreducible but cycles with the given period.
    Periodic { period: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index out of range: {what} = {index} (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("chain is not ergodic: {0:?}")]
    Ergodicity(ErgodicityFailure),

    #[error("singular matrix in {0}")]
    SingularMatrix(&'static str),

    #[error("no convergence after {iterations} iterations (final residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("eigenvalue computation failed in {0}")]
    EigenFailure(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
