use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{expected} labels expected, got {got}")]
    LabelCount { expected: usize, got: usize },

    #[error("backward requires a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("rank {rank} exceeds layer dimensions {rows}x{cols}")]
    RankTooLarge {
        rank: usize,
        rows: usize,
        cols: usize,
    },

    #[error("rank must be at least 1")]
    ZeroRank,

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("duplicate task `{0}`")]
    DuplicateTask(String),

    #[error("mask length {got} does not match {expected} branches")]
    MaskLength { expected: usize, got: usize },

    #[error("mask entry {value} at position {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: u8 },

    #[error("inconsistent modality partition: {0}")]
    Partition(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("could not place {classes} centers with margin {margin} in dimension {dim}")]
    CenterPlacement {
        classes: usize,
        margin: f64,
        dim: usize,
    },

    #[error("checkpoint format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite loss at task `{task}` step {step}")]
    NonFiniteLoss { task: String, step: usize },

    #[error("snapshot input hash mismatch for task `{0}`")]
    HashMismatch(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, left, right }
    }
}
