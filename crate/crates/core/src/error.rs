use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("decode error in field `{field}`: {reason}")]
    Decode { field: &'static str, reason: String },

    #[error("numeric failure in {what}{}", batch_index.map(|i| format!(" at batch index {i}")).unwrap_or_default())]
    Numeric {
        what: String,
        batch_index: Option<usize>,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact `{artifact}`; run `rise {command}` first")]
    Dependency { artifact: String, command: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn numeric(what: impl Into<String>, batch_index: Option<usize>) -> Self {
        Error::Numeric {
            what: what.into(),
            batch_index,
        }
    }
}
