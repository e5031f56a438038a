use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamselError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid label {label} for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("selection failed: {0}")]
    Selection(String),
    #[error("stream stats error: {0}")]
    Stats(String),
    #[error("variance decomposition error: {0}")]
    Decomposition(String),
    #[error("instance exceeds search guard: {0}")]
    Guard(String),
    #[error("probe error: {0}")]
    Probe(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StreamselError>;
