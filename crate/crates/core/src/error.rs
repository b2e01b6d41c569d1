use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("free-boundary iteration did not settle after {iterations} outer steps")]
    MaskNotStationary {
        iterations: usize,
        /// Penalized energy after each accepted outer step.
        trajectory: Vec<f64>,
    },

    #[error("sweep stopped at eps = {eps} after {completed} completed steps: {source}")]
    Sweep {
        eps: f64,
        completed: usize,
        partial: Vec<crate::scheduler::SweepEntry>,
        source: Box<Error>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("artifact schema error at byte {offset} ({field}): {reason}")]
    Schema {
        offset: usize,
        field: String,
        reason: String,
    },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// The innermost error, looking through sweep wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sweep { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
