use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("tensor contains non-finite values")]
    NonFiniteTensor,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; run a fresh forward first")]
    BackwardTwice,

    #[error("index {index} out of range (limit {limit}) in {what}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("quantization needs at least 2 bits, got {0}")]
    InvalidBits(u32),

    #[error("scale-factor must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("cannot initialize a scale-factor from an empty tensor")]
    EmptyTensor,

    #[error("truncation ratio {0} outside [0, 0.5)")]
    InvalidGamma(f64),

    #[error("quantization site `{0}` has no scale-factor")]
    Uncalibrated(String),

    #[error("quantization site `{0}` captured no activation during calibration")]
    MissingActivation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown loss mode `{0}` (expected gt-only, kd-only or kd+gt)")]
    InvalidLossMode(String),

    #[error("learning-rate step {step} beyond schedule length {total}")]
    ScheduleOverrun { step: usize, total: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
