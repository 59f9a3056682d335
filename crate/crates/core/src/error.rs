use std::path::PathBuf;

use crate::cluster::{JobId, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid GPU demand {demand}: must be in 1..={capacity}")]
    InvalidDemand { demand: u32, capacity: u32 },

    #[error("allocation conflict for {job}: node {node} has {free} free GPUs, {needed} needed")]
    AllocationConflict {
        job: JobId,
        node: NodeId,
        free: u32,
        needed: u32,
    },

    #[error("invalid placement: {0}")]
    InvalidPlacement(String),

    #[error("{0} not found")]
    NotFound(JobId),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid job state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: file has {found}, expected {expected}")]
    CheckpointMismatch { found: String, expected: String },

    #[error("non-finite value during training at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("audit failed: {0}")]
    Audit(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
