use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("aggregation set is empty")]
    NoParticipants,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("client {client} appears more than once in the aggregation set")]
    DuplicateClient { client: u32 },

    #[error("non-finite training loss for client {client} in round {round}")]
    Divergence { client: u32, round: u64 },

    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("round {got} recorded out of order (expected {expected})")]
    RoundOrder { expected: u64, got: u64 },

    #[error("baseline communication cost is zero")]
    ZeroBaseline,

    #[error("incomplete table, missing cells: {}", .0.join(", "))]
    IncompleteTable(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
