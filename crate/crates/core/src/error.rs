use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NonPsdInput { eigenvalue: f64 },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("operation requires a gaussian-mixture distribution, got {0}")]
    UnsupportedKind(String),
    #[error("condition {cond} out of range for model with {n_conditions} conditions")]
    ConditionOutOfRange { cond: usize, n_conditions: usize },
    #[error("condition supplied to an unconditional model")]
    UnconditionalModel,
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("schedule index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("invalid step order: {from} -> {to}")]
    InvalidStepOrder { from: usize, to: usize },
    #[error("grid of length {len} too short (need {needed})")]
    GridTooShort { len: usize, needed: usize },
    #[error("grid of {base} steps cannot be reduced to {target} by halving")]
    NonDivisibleGrid { base: usize, target: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
