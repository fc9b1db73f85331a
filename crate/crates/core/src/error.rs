use thiserror::Error;

/// Errors raised by the numerical and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    /// The generator is not weakly irreducible: its null space is more than one-dimensional.
    #[error("rank deficient generator: augmented system rank {rank} < {dim}")]
    RankDeficient { rank: usize, dim: usize },

    #[error("quasi-stationary solve produced negative entry {value:e} at state {state}")]
    NegativeSolution { state: usize, value: f64 },

    #[error("singular system (condition number estimate {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("required internal step {step:e} is below the underflow limit")]
    StepUnderflow { step: f64 },

    #[error("solvability violated for order {order}: forcing row sum {row_sum:e}")]
    SolvabilityViolation { order: usize, row_sum: f64 },

    #[error("layer term of order {order} does not decay: norm {norm:e} at tau = {tau}")]
    NoDecay { order: usize, tau: f64, norm: f64 },

    #[error("rate bound exceeded at t = {t}: |g_ii| = {rate} > {bound}")]
    RateBoundExceeded { t: f64, rate: f64, bound: f64 },

    #[error("negative variance rate {value:e} exceeds the round-off clamp")]
    NegativeVariance { value: f64 },

    #[error("only {resolved} epsilon points above the noise floor (need 3); increase replications")]
    InsufficientResolution { resolved: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
