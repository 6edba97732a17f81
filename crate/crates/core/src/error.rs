use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("zero variance: the field is constant")]
    ZeroVariance,

    #[error("optimizer did not converge after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence { iterations: usize, score_norm: f64 },

    #[error("unidentifiable at optimum: Fisher matrix is singular (condition number {condition:.3e})")]
    SingularFisher { condition: f64 },

    #[error("grid of {cells} cells exceeds the dense-matrix limit of {limit}; use the per-diagonal method")]
    SizeGuard { cells: usize, limit: usize },

    #[error("circulant embedding is not nonnegative definite (min eigenvalue {min_eigenvalue:.3e} at padding {padding}x)")]
    Embedding { min_eigenvalue: f64, padding: usize },

    #[error("missing header field `{0}`")]
    MissingField(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be finite, got {value}")))
    }
}
