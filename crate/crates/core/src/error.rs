use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrmmError>;

#[derive(Debug, Error)]
pub enum DrmmError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("path enumeration exceeds cap: {count} paths, cap {cap}")]
    EnumerationCap { count: u64, cap: u64 },

    #[error("singular linear system: {0}; rerun with a nonzero ridge")]
    SingularSystem(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("missing inference records: {0}")]
    MissingRecords(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    CrcMismatch { stored: u64, computed: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DrmmError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        DrmmError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
