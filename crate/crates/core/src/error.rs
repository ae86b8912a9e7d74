use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("position {position} out of bounds for sequence of length {len}")]
    PositionOutOfBounds { position: usize, len: usize },

    #[error("window [{start}, {end}) invalid for sequence of length {len}")]
    WindowOutOfBounds { start: usize, end: usize, len: usize },

    #[error("stale kv cache (stamp {stamp}): {reason}")]
    StaleCache { stamp: u64, reason: &'static str },

    #[error("no masked positions to unmask")]
    EmptyMaskedSet,

    #[error("confidence statistics not ready: no tokens generated in the current block")]
    StatsNotReady,

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("example `{0}` has no embedding")]
    MissingEmbedding(String),

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by inputs or configuration rather than a bug in the engine.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Invariant(_) | Error::StaleCache { .. })
    }
}

pub(crate) fn check_unit_interval(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            lo: 0.0,
            hi: 1.0,
        })
    }
}
