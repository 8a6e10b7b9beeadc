use thiserror::Error;

/// Errors raised by bound computation, model handling and certification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain violation in {op}: {detail}")]
    DomainViolation { op: &'static str, detail: String },

    #[error("exp relaxation overflow: upper bound {0} exceeds 700")]
    RangeOverflow(f64),

    #[error("linear bounds are in the wrong reference frame: {0}")]
    FrameMismatch(String),

    #[error("no interval available for node {0}")]
    MissingInterval(usize),

    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),

    #[error("clean input misclassified: predicted {predicted}, expected {expected}")]
    Misclassified { predicted: usize, expected: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("unsupported model shape: {0}")]
    UnsupportedShape(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("tensor `{tensor}` has shape {actual:?}, expected {expected:?}")]
    TensorShape {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(
    context: impl Into<String>,
    expected: impl std::fmt::Debug,
    actual: impl std::fmt::Debug,
) -> Error {
    Error::ShapeMismatch {
        context: context.into(),
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
