//! Condition-aware multimodal fusion for semantic segmentation.
//!
//! A shared convolutional backbone encodes four sensor modalities, per-modality
//! adapters align them, and a Condition Token derived from the RGB features
//! steers the fusion (weighted addition or windowed cross-attention). The crate
//! carries its own reverse-mode differentiation engine, a synthetic
//! condition-dependent benchmark, and the training/ablation harness.

pub mod condition;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod nn;
pub mod scenes;
pub mod seghead;
pub mod tensor;

pub use error::{Error, Result};
