use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (bad token id,
    /// non-positive temperature, probability vector that does not sum to 1).
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented contract between two inputs is violated, e.g. coupling
    /// marginals that do not match the space weights.
    #[error("contract violated: {0}")]
    Contract(String),

    /// The exhaustive oracle was asked to handle an instance outside its scope.
    #[error("outside oracle scope: {0}")]
    OracleScope(String),

    /// Exhaustive enumeration would exceed the configured size limit.
    #[error("size limit exceeded: {what} needs {needed} entries, limit is {limit}")]
    SizeLimit {
        what: &'static str,
        needed: u128,
        limit: u128,
    },

    /// The path has zero probability, so its information density is undefined.
    #[error("zero-probability path: {0}")]
    ZeroProbabilityPath(String),

    /// A computation produced NaN or an infinity where a finite value was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A constrained optimisation has no feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn dimension(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
