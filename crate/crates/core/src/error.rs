use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum OperaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported instance: {0}")]
    Unsupported(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("completeness violation at step {step} for hypothesis {hypothesis}: gap {gap:.3e} exceeds {tolerance:.3e}")]
    CompletenessViolation {
        step: usize,
        hypothesis: usize,
        gap: f64,
        tolerance: f64,
    },

    #[error("no feasible hypothesis at episode {episode}; smallest constraint values per step {min_lhs:?} against beta {beta}")]
    Infeasible {
        episode: usize,
        beta: f64,
        min_lhs: Vec<f64>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, OperaError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(OperaError::InvalidInput(msg.into()))
}
