use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed panel input. `location` names the offending row/column.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A formula or fit is undefined at this size (denominators, degenerate constraints).
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("infeasible weight set: {0}")]
    Infeasible(String),

    #[error("solver did not converge after {iterations} iterations (best KKT residual {best_residual:e})")]
    NonConvergence { iterations: usize, best_residual: f64 },

    #[error("network is not strongly connected ({components} components); decompose it first")]
    NotStronglyConnected { components: usize },

    #[error("null space of the weight matrix is numerically ambiguous; singular values {singular_values:?}")]
    RankAmbiguity { singular_values: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that come from the numerical solver rather than from
    /// the caller's input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::Infeasible(_) | Error::RankAmbiguity { .. })
    }
}
