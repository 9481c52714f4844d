use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("capability unsupported: {what} is not available on a {tier} backend")]
    CapabilityUnsupported { what: String, tier: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("position overflow: sequence of length {len} exceeds max_positions {max}")]
    PositionOverflow { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty score series")]
    EmptySeries,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("case {0} has no wrong-step annotation")]
    MissingAnnotation(String),

    #[error("mixed configuration: {0}")]
    MixedConfiguration(String),

    #[error("unknown case id {0}")]
    UnknownCase(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: validation error: {rule}")]
    Validation {
        path: PathBuf,
        line: usize,
        rule: String,
    },

    #[error("join failed: {0}")]
    Join(String),

    #[error("parameter file: {0}")]
    ParamFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn unsupported(what: impl Into<String>, tier: impl ToString) -> Self {
        Error::CapabilityUnsupported {
            what: what.into(),
            tier: tier.to_string(),
        }
    }
}
