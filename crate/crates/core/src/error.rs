use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{op} did not converge after {iterations} iterations")]
    NoConvergence { op: &'static str, iterations: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid superblock plan: {0}")]
    Plan(String),

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("trace is missing {0}")]
    MissingTrace(String),

    #[error("non-finite activation at the output of layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("loss became NaN (first non-finite activation at layer {layer:?})")]
    NanLoss { layer: Option<usize> },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
