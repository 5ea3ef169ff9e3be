use std::path::PathBuf;

use crate::state::RiskLevel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no profile or judge verdict for tool `{tool}` at step {step_index}")]
    UnclassifiableAction { tool: String, step_index: u64 },

    #[error("corpus contains no usable transitions")]
    EmptyCorpus,

    #[error("invalid binomial count: {successes} successes out of {n}")]
    InvalidCount { successes: u64, n: u64 },

    #[error("VIOLATED row is not absorbing")]
    NotAbsorbing,

    #[error("I - Q is singular: {0} cannot reach VIOLATED")]
    SingularChain(RiskLevel),

    #[error("expected a first-order matrix, got order {0}")]
    NotFirstOrder(usize),

    #[error("unsupported Markov order {0}")]
    InvalidOrder(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("session is closed")]
    SessionClosed,

    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}:{line}: {message}", path.display())]
    Consistency {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
