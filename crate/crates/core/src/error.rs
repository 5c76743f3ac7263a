use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("non-finite value in {context}")]
    NonFinite {
        context: String,
        /// The parameter vector at which evaluation blew up, when one is available.
        iterate: Option<Vec<f64>>,
    },

    #[error("trajectory diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        last_stable: Vec<f64>,
    },

    #[error("the memory pool is empty")]
    EmptyPool,

    #[error("minibatch is empty")]
    EmptyBatch,

    #[error("batch index {index} out of range for {len} rows")]
    BatchIndex { index: usize, len: usize },

    #[error("log acceptance ratio is NaN")]
    NanLogRatio,

    #[error("pool has {size} entries, surrogate fit needs at least {required}")]
    PoolTooSmall { size: usize, required: usize },

    #[error("surrogate {stage} training produced a non-finite loss at epoch {epoch}")]
    SurrogateTraining { stage: &'static str, epoch: usize },

    #[error("model-free branch reached without a fitted surrogate")]
    SurrogateMissing,

    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { got: usize, required: usize },

    #[error("invalid probabilities at row {row}: {message}")]
    InvalidProbability { row: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("output directory {} already exists", .0.display())]
    OutputExists(PathBuf),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
