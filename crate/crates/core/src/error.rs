use thiserror::Error;

/// Errors raised anywhere in the model, data, or training pipeline.
#[derive(Debug, Error)]
pub enum MuseError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite value in tensor produced by `{0}`")]
    NonFinite(String),
    #[error("checkpoint error at `{entry}`: {reason}")]
    Checkpoint { entry: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MuseError>;

impl MuseError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MuseError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        MuseError::Contract(msg.into())
    }
}
