use thiserror::Error;

use crate::engine::TraceRecord;

/// Errors raised by the algebra, the protocol machines, the event engine and
/// the chain orchestration.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration or model is malformed.
    #[error("configuration error: {0}")]
    Config(String),

    /// No parameter choice can meet the requested target.
    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),

    /// A state machine received an input it cannot accept.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An event was scheduled before the current simulation time.
    #[error("scheduling error: event at {at_ns} ns precedes current time {now_ns} ns")]
    Scheduling { at_ns: u64, now_ns: u64 },

    /// A herald reached a node that had not finished the previous cycle.
    #[error("desynchronization at hop {hop}, cycle {cycle}: {reason}")]
    Desync {
        hop: usize,
        cycle: u64,
        reason: String,
    },

    /// A handler failed; the offending event is attached.
    #[error("run aborted at event {event}: {source}")]
    Aborted {
        event: Box<TraceRecord>,
        source: Box<Error>,
    },
}

impl Error {
    /// Strips [`Error::Aborted`] wrappers and returns the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Aborted { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_desync(&self) -> bool {
        matches!(self.root(), Error::Desync { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
