use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dispersion is undefined for fewer than two values (got {0})")]
    UndefinedDispersion(usize),

    #[error("all importance weights are zero or non-finite")]
    DegenerateWeights,

    #[error("non-finite {what} at index {index}: {value}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("{0}")]
    Singular(String),

    #[error("estimate is unreliable: {0}")]
    Unreliable(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
