//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, numerics, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied arguments was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// An index was outside the valid range.
    #[error("index out of range in {context}: {index} >= {len}")]
    IndexOutOfRange {
        context: String,
        index: usize,
        len: usize,
    },

    /// A computation produced a non-finite value.
    #[error("non-finite value in {context}{}", match .index { Some(i) => format!(" (parameter index {i})"), None => String::new() })]
    NonFinite {
        context: String,
        index: Option<usize>,
    },

    /// A covariance factorization failed even after jitter escalation.
    #[error("Cholesky factorization failed in {0}")]
    Factorization(String),

    /// A time integration went unstable.
    #[error("numerical instability: {0}")]
    Instability(String),

    /// Adaptive quadrature failed to reach the requested tolerance.
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    /// The sampler's step-size adaptation collapsed during warmup.
    #[error("sampler failure: {message} (divergences {divergences}, final step size {step_size:.3e})")]
    SamplerCollapse {
        message: String,
        divergences: usize,
        step_size: f64,
    },

    /// The 4DVar line search failed after optimizer restarts.
    #[error("line search failed after restarts: {0}")]
    LineSearch(String),

    /// File I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A data file could not be parsed.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// True for failures of the numerics rather than of the caller's inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Factorization(_)
                | Error::Instability(_)
                | Error::Quadrature(_)
                | Error::SamplerCollapse { .. }
                | Error::LineSearch(_)
        )
    }
}
