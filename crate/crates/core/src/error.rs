//! Error types shared across the crate.

/// Errors produced by grid construction, covariance algebra, model
/// evaluation, and sampling.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// The covariance base matrix has a DFT eigenvalue at or below the
    /// positive-definiteness tolerance. Carries the offending minimum
    /// eigenvalue so callers can report how far from valid the model is.
    /// Remedies: enlarge the extension factor or tighten the prior on the
    /// spatial decay parameter.
    #[error(
        "toroidal covariance is not positive definite (min eigenvalue {min_eig:.6e}); \
         increase the grid extension factor or reduce the spatial decay range"
    )]
    NonPositiveDefinite { min_eig: f64 },

    /// Invalid input: bad arguments, malformed data, or configuration that
    /// violates a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A numerical procedure failed to produce a usable result (singular
    /// matrix, non-finite value, failed factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Shorthand for a [`Error::Validation`] with a formatted message.
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Shorthand for a [`Error::Numerical`] with a formatted message.
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
