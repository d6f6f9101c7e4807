use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum DareError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("matrix is numerically singular (sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e})")]
    Singular { sigma_min: f64, sigma_max: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token index {index} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },

    #[error("distribution is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("operation requires the single-layer single-head regime (got L = {layers}, H = {heads})")]
    Regime { layers: usize, heads: usize },

    #[error("weight file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DareError>;
