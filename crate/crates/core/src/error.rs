use std::io;

use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("depth must be 6n+2 with n >= 1, got {depth} (nearest valid depths: {below:?}, {above})")]
    InvalidDepth {
        depth: usize,
        below: Option<usize>,
        above: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch at node {node}: {left:?} vs {right:?}")]
    ShapeMismatch {
        node: NodeId,
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("shape error at node {node}: {reason}")]
    Shape { node: NodeId, reason: String },

    #[error("tensor shape mismatch: expected {expected:?}, got {found:?}")]
    TensorShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value produced by node {node}")]
    NonFinite { node: NodeId },

    #[error("forward cache does not match this graph or parameter store: {0}")]
    StaleCache(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error is a user-input problem (bad config, bad flag,
    /// malformed file) as opposed to a runtime or numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDepth { .. }
                | Error::InvalidConfig(_)
                | Error::ShapeMismatch { .. }
                | Error::Shape { .. }
                | Error::TensorShape { .. }
                | Error::Format { .. }
                | Error::Json(_)
        )
    }
}
