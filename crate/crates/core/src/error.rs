use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a precondition. `field` names the key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Grids, component counts or array lengths disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Density reached (or fell below) the positivity guard.
    #[error("positivity violation in {context}: min density {min:e}")]
    Positivity { context: String, min: f64 },

    /// The Gram solve did not reach tolerance.
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },

    #[error("statistical estimate unavailable: {0}")]
    Statistics(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn positivity(context: impl Into<String>, min: f64) -> Self {
        Error::Positivity {
            context: context.into(),
            min,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
