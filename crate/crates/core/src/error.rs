use thiserror::Error;

pub type Result<T> = std::result::Result<T, StsError>;

#[derive(Debug, Error)]
pub enum StsError {
    /// A tensor dimension disagrees with what an operation requires.
    #[error("shape mismatch at {context}: {dim} expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// NaN or infinity surfaced where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Malformed tensor file, checkpoint, or report.
    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StsError {
    pub(crate) fn shape(context: impl Into<String>, dim: &'static str, expected: usize, actual: usize) -> Self {
        StsError::ShapeMismatch {
            context: context.into(),
            dim,
            expected,
            actual,
        }
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        StsError::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
