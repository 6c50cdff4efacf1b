use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("dimension {dimension} exceeds the limit of {limit} for {operation}")]
    DimensionTooLarge {
        operation: &'static str,
        dimension: usize,
        limit: usize,
    },

    #[error("rank-deficient system: pivot {pivot:e} at column {column} (size {size})")]
    RankDeficient { column: usize, size: usize, pivot: f64 },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("data error at row {row}, column {column}: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
