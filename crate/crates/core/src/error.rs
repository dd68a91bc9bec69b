use thiserror::Error;

use crate::color::GainTriple;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate illuminant: {0}")]
    DegenerateIlluminant(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),

    #[error("optimization failed after {evals} evaluations (best so far {best:?})")]
    OptimizationFailure { best: GainTriple, evals: usize },

    #[error("clustering failed: {0}")]
    ClusteringFailure(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
