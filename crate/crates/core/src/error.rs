use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("grid geometry mismatch: {0}")]
    Alignment(String),

    #[error("empty extent: {0}")]
    EmptyExtent(String),

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("sampler failed to converge: {0}")]
    Convergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing upstream artifact: {artifact} (run stage `{stage}` first)")]
    Dependency { artifact: String, stage: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
