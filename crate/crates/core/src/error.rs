use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("dimension error: expected feature length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("scene token index {index} out of range ({len} tokens)")]
    Index { index: usize, len: usize },
    #[error("missing annotation: {0}")]
    MissingAnnotation(String),
    #[error("heterogeneous batch: {0}")]
    Heterogeneity(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("expected exactly {expected} human answers, got {got}")]
    Arity { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
