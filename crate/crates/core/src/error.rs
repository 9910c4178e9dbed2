use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid law: {0}")]
    InvalidLaw(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("numerical instability: {0}")]
    Unstable(String),

    #[error("no convergence in theta; ladder {ladder:?}, sup-norm changes {changes:?}")]
    ThetaNonConvergence { ladder: Vec<f64>, changes: Vec<f64> },

    #[error("key mismatch between observed and predicted series: {0}")]
    KeyMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
