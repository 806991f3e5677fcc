//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {kind} file version {version}")]
    UnsupportedVersion { kind: &'static str, version: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("batch must contain at least 2 items, got {0}")]
    BatchTooSmall(usize),

    #[error("code width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },

    #[error(
        "non-finite loss at epoch {epoch}, step {step}: \
         contrastive={contrastive}, kl={kl}"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        contrastive: f64,
        kl: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
