use std::path::PathBuf;

/// Errors raised across the predictor pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("node index {index} out of range for graph with {len} nodes")]
    NodeOutOfRange { index: usize, len: usize },

    #[error("op index {op} at node {node} is outside the vocabulary of size {vocab}")]
    UnknownOp { node: usize, op: usize, vocab: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("kendall tau undefined: every value in `{0}` is tied")]
    AllTied(&'static str),

    #[error("batch has no strictly ordered pair")]
    NoOrderedPair,

    #[error("requested {requested} ids but only {available} are available")]
    InsufficientIds { requested: usize, available: usize },

    #[error("could only sample {found} distinct graphs out of {requested}")]
    SamplerExhausted { requested: usize, found: usize },

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("query budget of {0} exhausted")]
    BudgetExhausted(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
