use thiserror::Error;

/// Errors raised by the estimation, control and selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid wind context: direction {direction}, level {level}")]
    InvalidContext { direction: u8, level: u8 },

    #[error("degenerate reference: desired force direction is undefined")]
    DegenerateReference,

    #[error("weights are not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("inconsistent horizon window: {0}")]
    InconsistentWindow(String),

    #[error("singular innovation covariance")]
    SingularInnovation,

    #[error("ill-conditioned sensitivity recursion at step {step} (condition {condition:e})")]
    IllConditioned { step: usize, condition: f64 },

    #[error("MHE solution did not converge")]
    NotConverged,

    #[error("ill-conditioned kernel matrix (condition {0:e}) after jitter escalation")]
    IllConditionedKernel(f64),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("empty candidate pool")]
    EmptyPool,

    #[error("every candidate context has already been selected")]
    PoolExhausted,

    #[error("performance table: {0}")]
    Table(String),

    #[error("simulation diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
