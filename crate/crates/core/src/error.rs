use thiserror::Error;

pub type Result<T> = std::result::Result<T, EdkError>;

#[derive(Debug, Error)]
pub enum EdkError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("lookup error: id {id} out of range for field {field} (vocab size {vocab_size})")]
    Lookup {
        field: usize,
        id: u32,
        vocab_size: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// A batch lacks one of the two labels; the caller has to resample.
    #[error("batch composition error: {0}")]
    BatchComposition(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EdkError {
    /// Process exit code used by the CLI: 2 config, 3 data, 4 numeric/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            EdkError::Config(_) | EdkError::Contract(_) => 2,
            EdkError::Data(_)
            | EdkError::Parse { .. }
            | EdkError::Lookup { .. }
            | EdkError::BatchComposition(_)
            | EdkError::Metric(_)
            | EdkError::Checkpoint(_)
            | EdkError::Input(_)
            | EdkError::Io(_)
            | EdkError::Json(_) => 3,
            EdkError::Shape(_) | EdkError::Numeric(_) | EdkError::Divergence { .. } => 4,
        }
    }
}
