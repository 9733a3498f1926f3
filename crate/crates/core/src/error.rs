use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("pole collision: poles {0} and {1} are closer than the admissible distance")]
    PoleCollision(usize, usize),

    #[error("singular matrix encountered at pivot {pivot}")]
    Singular { pivot: usize },

    #[error("factorization missing for pole {pole} (model version changed or not factorized)")]
    CacheMiss { pole: usize },

    #[error("residual check failed for pole {pole}: relative residual {residual:e}")]
    ResidualCheck { pole: usize, residual: f64 },

    #[error("problem too large for dense route: N = {n} > limit {limit}")]
    DenseLimit { n: usize, limit: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("inversion diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("problem spec parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
