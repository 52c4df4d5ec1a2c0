use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite function value at coordinate {0}")]
    NonFiniteValue(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> GradError {
    GradError::Shape {
        op,
        detail: detail.into(),
    }
}
