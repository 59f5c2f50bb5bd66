use thiserror::Error;

/// Errors produced anywhere in the estimation, training and analysis stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid sample matrix: {0}")]
    InvalidSamples(String),

    #[error("invalid neighbor order k={k} for n={n} samples (need 1 <= k <= n-1)")]
    InvalidK { k: usize, n: usize },

    #[error("degenerate gradient: samples {i} and {j} are at distance {distance:e}")]
    DegenerateGradient { i: usize, j: usize, distance: f64 },

    #[error("need at least 2 entropy taps, got {0}")]
    InsufficientTaps(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined baseline: percent change relative to zero")]
    UndefinedBaseline,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported task: {0}")]
    UnsupportedTask(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
