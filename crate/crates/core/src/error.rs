use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mode {mode} is out of range for an order-{order} tensor")]
    InvalidMode { mode: usize, order: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank {rank} exceeds size {size} of mode {mode}")]
    RankTooLarge {
        mode: usize,
        rank: usize,
        size: usize,
    },

    #[error("qr_orthonormal requires rows >= cols, got {rows}x{cols}")]
    QrShape { rows: usize, cols: usize },

    #[error("truncation budget must be nonnegative, got {0}")]
    NegativeBudget(f64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] Box<csv::Error>),
}

pub type Result<T> = std::result::Result<T, Error>;
