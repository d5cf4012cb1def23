use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("zero tail mass at progress {progress}: no job can be in service that long")]
    ZeroTail { progress: u64 },

    #[error("infeasible schedule: {0}")]
    InfeasibleDecision(String),

    #[error("relative value iteration did not converge after {iterations} iterations (span {span:e})")]
    NoConvergence { iterations: usize, span: f64 },

    #[error("network {network} does not have geometric service")]
    NotGeometric { network: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("brute-force selection supports at most {max} candidates, got {count}")]
    TooLarge { count: usize, max: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
