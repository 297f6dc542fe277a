use std::io;

use thiserror::Error;

/// Errors produced by the adaptation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("source model reached mIoU {achieved:.4} on held-out clean frames, below target {target:.4}")]
    TrainingTarget { achieved: f64, target: f64 },

    #[error("no class is present in the confusion matrix")]
    NoClasses,

    #[error("need at least {needed} classes with data, found {found}")]
    InsufficientClasses { needed: usize, found: usize },

    #[error("adaptation diverged at frame {frame} (round {round}, domain {domain}): {detail}")]
    Diverged {
        frame: usize,
        round: usize,
        domain: String,
        detail: String,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
