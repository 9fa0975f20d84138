use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible: {requested} > {n}! = {available}")]
    InfeasibleSet {
        requested: usize,
        n: usize,
        available: u128,
    },
    #[error("invalid grid: need at least 2 tiles, got {0}")]
    InvalidGrid(usize),
    #[error("invalid pair: permutations of size {0} and {1}")]
    InvalidPair(usize, usize),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("permutation {0:?} is not in the active set")]
    UnknownPermutation(Vec<usize>),
    #[error("no source samples to draw from")]
    EmptySource,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error("training diverged: non-finite {loss} loss at batch {batch}")]
    Divergence { loss: &'static str, batch: usize },
    #[error("adaptation diverged: non-finite auxiliary loss at iteration {0}")]
    AdaptationDivergence(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 for numerical divergence, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::AdaptationDivergence(_) => 3,
            _ => 2,
        }
    }
}
