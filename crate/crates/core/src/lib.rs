//! Contrastive pre-training lab: image views, a small MLP encoder with
//! hand-written gradients, InfoNCE-family objectives and view-quality metrics.

pub mod augment;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod tensor;

pub use error::{ClabError, Result};
