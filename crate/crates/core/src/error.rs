use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{op}: input outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("axis {axis} out of range for a rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} does not belong to this tape")]
    UnknownVar(usize),

    #[error("values are unavailable on a shape-only tape")]
    ShapeOnly,

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("gradient for unknown parameter `{0}`")]
    UnknownGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Whether the failure is numeric (divergence or non-finite values) rather
    /// than a usage or data problem.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
