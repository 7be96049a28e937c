use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ClabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClabError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("queue is empty; a contrastive loss needs at least one negative")]
    EmptyQueue,

    #[error("key {index} is not unit-normalized (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },

    #[error("activation record does not belong to these parameters")]
    StaleRecord,

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("loss became {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("anchor embeddings with zero self-similarity: {0:?}")]
    ZeroAnchors(Vec<usize>),

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ClabError {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        ClabError::Format {
            format,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClabError::Io {
            path: path.into(),
            source,
        }
    }
}
