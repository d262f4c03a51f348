//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: configuration
//! problems (exit 2), numerical failures during simulation (exit 3), and
//! verification assertion failures (exit 4).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad keys, shapes, ranges).
    #[error("config: {0}")]
    Config(String),

    /// A simulated quantity left the finite range; reports where.
    #[error("numerical failure: non-finite state in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    /// Generic numerical failure with context (degenerate denominator, SPD
    /// factorization failure, stiff-limit violation, ...).
    #[error("numerical failure: {0}")]
    Numerics(String),

    /// Importance-sampling fallback produced too small an effective sample size.
    #[error("degenerate importance weights: ESS {ess:.1} of {n} draws is below {min_fraction:.1}%")]
    DegenerateWeights { ess: f64, n: usize, min_fraction: f64 },

    /// An exact-identity or invariant check failed during `verify`.
    #[error("verification failed: {0}")]
    Verify(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } | Error::Numerics(_) | Error::DegenerateWeights { .. } => 3,
            Error::Verify(_) => 4,
            Error::Io(_) => 3,
        }
    }
}
