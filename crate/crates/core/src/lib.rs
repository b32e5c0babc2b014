//! Uncertainty-gated region retrieval for semantic segmentation.
//!
//! An ensemble of test-time-augmented logits yields per-pixel uncertainty.
//! Uncertain connected regions are described by pooled patch embeddings,
//! matched against a memory bank of confident labelled regions, and the
//! retrieved labels are blended into the prediction for regions that pass
//! a gate.

pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gating;
pub mod pipeline;
pub mod regions;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod uncertainty;

pub use config::PipelineConfig;
pub use error::{Error, Result};
