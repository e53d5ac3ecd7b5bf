use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("capacity error: {ground_truth} ground-truth boxes exceed {proposals} proposals")]
    Capacity { ground_truth: usize, proposals: usize },
    #[error("no target: {0}")]
    NoTarget(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("class sets of tasks {0} and {1} overlap")]
    Disjointness(usize, usize),
    #[error("missing checkpoint for task {task} at {path}")]
    MissingCheckpoint { task: usize, path: PathBuf },
    #[error("incompatible inputs: {0}")]
    Compatibility(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
