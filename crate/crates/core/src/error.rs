use thiserror::Error;

use crate::driver::RunReport;

pub type Result<T, E = CesisError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CesisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("density error: {0}")]
    Density(String),

    #[error("no effective samples: every weight is zero")]
    NoEffectiveSamples,

    #[error("degenerate mixture component {component}: {reason}")]
    Degenerate { component: usize, reason: String },

    #[error("no feasible mixture order on the candidate grid")]
    Selection,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("simulation failed at iteration {iteration}: {message}")]
    Simulation {
        iteration: usize,
        message: String,
        partial: Box<RunReport>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CesisError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CesisError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CesisError::Config(msg.into())
    }

    /// True for errors caused by a bad configuration rather than a failed computation.
    pub fn is_config(&self) -> bool {
        matches!(self, CesisError::Config(_) | CesisError::InvalidInput(_))
    }
}
