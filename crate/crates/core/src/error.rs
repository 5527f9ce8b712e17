use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate variance in lead {lead}")]
    DegenerateVariance { lead: usize },

    #[error("degenerate range: clip is constant")]
    DegenerateRange,

    #[error("segmentation infeasible: {0}")]
    SegmentationInfeasible(String),

    #[error("zero-norm vector: cosine similarity undefined")]
    ZeroNorm,

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
