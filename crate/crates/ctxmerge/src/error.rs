//! Crate-wide error type.

use crate::chunk::ChunkId;
use crate::trace::MergeTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty context set")]
    EmptyContextSet,

    #[error("multiplier must be positive, got {0}")]
    InvalidMultiplier(f64),

    #[error("budget computes to zero tokens (multiplier {multiplier}, avg chunk len {avg})")]
    ZeroBudget { multiplier: f64, avg: f64 },

    #[error("query text is empty")]
    EmptyQuery,

    #[error("empty source chunk")]
    EmptySourceChunk,

    #[error("no anchor available")]
    NoAnchor,

    #[error("logprob alignment failure: {0}")]
    LogprobAlignment(String),

    #[error("unbound placeholder: {0}")]
    UnboundPlaceholder(String),

    #[error("working set has fewer than 2 chunks")]
    PairUnavailable,

    #[error("target count {target} exceeds initial count {initial}")]
    TargetExceedsInitial { target: usize, initial: usize },

    #[error("fusion of pair ({left}, {right}) failed")]
    FuseFailed {
        left: ChunkId,
        right: ChunkId,
        #[source]
        source: Box<Error>,
    },

    #[error("transport failure after {attempts} attempt(s): {msg}")]
    Transport {
        attempts: u32,
        msg: String,
        /// Whether the underlying failure class is worth retrying at a
        /// higher level (timeouts, 5xx), as opposed to a hard 4xx.
        retriable: bool,
    },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("score is not finite: {0}")]
    NonFiniteScore(f64),

    #[error("pairwise matrix aborted after {rows_completed} completed row(s)")]
    MatrixAborted {
        rows_completed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replay fixture has no entry for key {0:?}")]
    ReplayMiss(String),

    #[error("merge run aborted; partial trace attached")]
    RunAborted {
        #[source]
        source: Box<Error>,
        trace: Box<MergeTrace>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: invalid JSON: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The partial trace attached to an aborted merge run, if any.
    pub fn partial_trace(&self) -> Option<&MergeTrace> {
        match self {
            Error::RunAborted { trace, .. } => Some(trace),
            _ => None,
        }
    }
}
