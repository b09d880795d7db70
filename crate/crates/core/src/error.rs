use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss node {0} is not on the active tape (graph released or foreign)")]
    DetachedLoss(usize),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("focal loss focusing parameter must be non-negative, got {0}")]
    NegativeGamma(f64),

    #[error("mask has no active entries")]
    EmptyMask,

    #[error("primary class {class} out of range for hierarchy with {num_primary} classes")]
    PrimaryClassOutOfRange { class: usize, num_primary: usize },

    #[error("need at least {needed} auxiliary classes, got {got}")]
    TooFewAux { needed: usize, got: usize },

    #[error("invalid hierarchy level pair: primary {primary}, auxiliary {aux}")]
    InvalidLevelPair { primary: usize, aux: usize },

    #[error("human hierarchy requires fine-grained CIFAR-100 labels")]
    HumanWithoutHierarchy,

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite {stage} loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
