use thiserror::Error;

use crate::runtime::Rank;

/// Errors raised anywhere in the simulated stack.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
    #[error("stale handle: {kind} {id} belongs to epoch {handle_epoch}, current epoch is {current_epoch}")]
    StaleHandle {
        kind: &'static str,
        id: u32,
        handle_epoch: u32,
        current_epoch: u32,
    },
    #[error("invalid rank {rank} for communicator of size {size}")]
    InvalidRank { rank: i64, size: usize },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("unknown virtual {kind} handle {id}")]
    UnknownVirtualHandle { kind: &'static str, id: u64 },
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
    #[error("checkpoint round {0} already in progress")]
    RejectedBusy(u32),
    #[error("drain stuck: rank {to} still expects {missing_bytes} bytes / {missing_msgs} messages from rank {from}")]
    DrainStuck {
        from: Rank,
        to: Rank,
        missing_bytes: u64,
        missing_msgs: u64,
    },
    #[error("checkpoint aborted: {0}")]
    CheckpointAborted(String),
    #[error("restart incomplete: {0}")]
    RestartIncomplete(String),
    #[error("incompatible image: {0}")]
    IncompatibleImage(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("restart inconsistency: {0}")]
    RestartInconsistency(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
