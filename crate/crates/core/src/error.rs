use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node {0} is isolated (zero degree)")]
    IsolatedNode(usize),

    #[error("degenerate kernel scale: feature {feature} has zero distance to its {k}-th nearest neighbor")]
    DegenerateScale { feature: usize, k: usize },

    #[error("eigensolver did not converge after {iterations} iterations (n = {n})")]
    Convergence { iterations: usize, n: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("label {label} out of range 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("architecture parse error at token {token:?}: {message}")]
    Architecture { token: String, message: String },

    #[error("numerical failure at epoch {epoch}: {diagnostics}")]
    Numerical { epoch: usize, diagnostics: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Convergence { .. } | Error::Numerical { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
