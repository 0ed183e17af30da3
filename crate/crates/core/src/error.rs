use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One rejected configuration or parameter field.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("validation failed: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<FieldError>),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("coupling bridge rejected {rejects} times without staying inside the ball")]
    BridgeExhausted { rejects: usize },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Fails unless `l` has unit length within 1e-12.
pub fn require_unit(field: &str, l: &crate::Vector) -> Result<()> {
    if l.is_unit(1e-12) {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("expected a unit vector, |l| = {}", l.norm()),
        ))
    }
}
