use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,

    #[error("{what} out of range: {value} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty point set")]
    EmptySet,

    #[error("reconstruction has no points")]
    EmptyReconstruction,

    #[error("too few points: need {need}, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("no scores to aggregate")]
    EmptyScores,

    #[error("labels contain a single class")]
    SingleClass,

    #[error("labels contain no positives")]
    NoPositives,

    #[error("anomaly region selects no points")]
    EmptyRegion,

    #[error("empty neighborhood for point {0}")]
    EmptyNeighborhood(usize),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing corpus: {0}")]
    MissingCorpus(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
