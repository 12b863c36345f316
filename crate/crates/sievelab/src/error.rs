use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cost budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("no real primitive character exists for modulus {0}")]
    NoRealCharacter(u64),

    #[error("tolerance {eps:e} not achievable within cutoff {cutoff}")]
    Tolerance { eps: f64, cutoff: u64 },

    #[error("{path}:{line}: {msg}")]
    Csv {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
