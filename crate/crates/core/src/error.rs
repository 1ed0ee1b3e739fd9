use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("reward {value} at index {index} is not binary (expected 0.0 or 1.0)")]
    NonBinaryReward { index: usize, value: f64 },

    #[error("group size {0} is too small (need at least 2 responses)")]
    GroupTooSmall(usize),

    #[error("K must lie strictly inside (0,1), got {0}")]
    InvalidQuantile(f64),

    #[error("std floor eps_std must be finite and >= 0, got {0}")]
    InvalidEpsilon(f64),

    #[error("standardizing denominator is zero (std = 0 and eps_std = 0)")]
    DivisionByZero,

    #[error("probability ratio must be strictly positive, got {0}")]
    NonPositiveRatio(f64),

    #[error("rollout group contains no responses or an empty response")]
    EmptyGroup,

    #[error("success rate {0} is degenerate (must lie strictly inside (0,1))")]
    DegenerateP(f64),

    #[error("operation requires a flat-bandit policy")]
    ModeUnsupported,

    #[error("policy is uniform (Cov(log pi, pi) = {0:e} <= 1e-12)")]
    UniformPolicy(f64),

    #[error("every query in the batch was skipped by dynamic sampling")]
    EmptyBatch,

    #[error("invalid pass@k counts: n={n}, c={c}, k={k}")]
    InvalidCounts { n: u64, c: u64, k: u64 },

    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("metrics sink error: {0}")]
    Sink(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("chart rendering failed: {0}")]
    Plot(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
