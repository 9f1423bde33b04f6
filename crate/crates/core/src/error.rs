use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter set or input that fails validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Iterates became non-finite or exploded inside the AMP inner loop.
    #[error("AMP diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    /// A message update hit a 0/0 or similar degenerate configuration.
    #[error("degenerate message: {0}")]
    DegenerateMessage(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    /// True for failures caused by the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::DegenerateMessage(_) | Error::NoConvergence { .. } | Error::Singular(_)
        )
    }
}
