use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("{what} exceeds enumeration limit {limit}")]
    SizeLimit { what: String, limit: usize },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("retry budget exhausted after {attempts} attempts: {reason}")]
    RetryBudgetExhausted { attempts: usize, reason: String },

    #[error("domain violation in `{op}` at tape node {node}")]
    Domain { op: &'static str, node: usize },

    #[error("gradient requested for a non-scalar output of shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }
}
