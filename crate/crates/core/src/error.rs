use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem `{problem}` does not provide {what}")]
    Missing { problem: String, what: &'static str },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("path diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDiverged { iteration: usize, reason: String },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
