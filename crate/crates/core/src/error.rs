use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },

    #[error("gradient needs a scalar output; node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric undefined at {0:?}")]
    MetricUndefined(Vec<f64>),

    #[error("diverged: {0}")]
    Divergence(String),

    #[error("unknown dataset {0}")]
    UnknownDataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("eigen-decomposition: {0}")]
    Eigen(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
