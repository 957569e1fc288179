use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter or buffer `{0}`")]
    UnknownName(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("container format error: {0}")]
    Format(String),
    #[error("dtype mismatch: container holds {found}, expected {expected}")]
    Dtype { expected: &'static str, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
