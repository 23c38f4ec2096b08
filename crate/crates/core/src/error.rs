use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution mass entirely outside [0,N]")]
    DegenerateTruncation,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("support violation: counts sum to {got}, expected volume {expected}")]
    SupportViolation { expected: u64, got: u64 },
    #[error("no samples supplied")]
    EmptySamples,
    #[error("unknown group-set kind `{0}`")]
    UnknownGroupKind(String),
    #[error("weights are not on the probability simplex: {0}")]
    NotOnSimplex(String),
    #[error("infeasible joint action: {0}")]
    InfeasibleAction(String),
    #[error("episode already finished at t={0}")]
    EpisodeFinished(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,
    #[error("instance too large for exhaustive enumeration ({0} joint actions)")]
    InstanceTooLarge(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cb mode requires a trained worst-case predictor checkpoint")]
    MissingPredictor,
    #[error("exhaustive worst-case search needs a clonable environment handle")]
    NotClonable,
    #[error("per-group transitions supplied; use approx_bellman_apply")]
    PerGroupTransitions,
    #[error("value iteration did not converge in {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
