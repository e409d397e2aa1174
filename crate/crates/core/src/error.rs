use thiserror::Error;

/// Failure modes shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A covariance failed to factor even after one diagonal jitter pass.
    #[error("matrix is not positive definite, even after diagonal jitter")]
    CholeskyFailure,
    /// Every ancestor received zero selection mass (all ω_i ψ(ξ_i) = 0).
    #[error("all ancestor selection weights vanish")]
    DegenerateAncestors,
    /// The proposal density vanished at a point where the target kernel is
    /// positive, so the importance weight is undefined.
    #[error("proposal density vanishes where the target kernel is positive (log kernel = {log_kernel})")]
    AbsoluteContinuityViolation { log_kernel: f64 },
    /// The running normalizing-constant iterate left (0, ∞).
    #[error("normalizing-constant iterate became {value}")]
    DegenerateNormalizer { value: f64 },
    /// A filter step produced no particle with positive finite weight.
    #[error("particle weights collapsed: no positive finite weight remains")]
    FilterCollapse,
    /// An observation lies outside the model's support.
    #[error("observation outside model support: {0}")]
    InvalidObservation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
