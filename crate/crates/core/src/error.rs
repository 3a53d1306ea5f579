use thiserror::Error;

/// Errors produced anywhere in the NAC pipeline.
#[derive(Debug, Error)]
pub enum NacError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("training diverged: non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("coverage model is frozen and cannot be updated")]
    Frozen,

    #[error("coverage model must be frozen before scoring")]
    NotFrozen,

    #[error("unknown neuron {neuron} (layer has {neurons} neurons)")]
    UnknownNeuron { neuron: usize, neurons: usize },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NacError> = std::result::Result<T, E>;
