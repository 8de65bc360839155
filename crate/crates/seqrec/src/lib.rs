//! Sequential recommendation with content-aligned item representations.
//!
//! The crate trains a small transformer recommender from scratch on CPU:
//! an ID tower over interaction sequences, a content tower over text/image
//! feature tables aligned to the ID space, and a cross-attention decoder
//! that mixes the two. Training runs in two steps (ID-only pretraining,
//! then content post-training with low-rank adapters on the frozen ID
//! tower), and everything — data synthesis, batching, optimization,
//! evaluation — is deterministic under a single seed.
//!
//! Module map:
//! - [`numerics`]: matrices, differentiable graph, Adam, gradient checking
//! - [`data`]: catalogs, interaction logs, splits, batching, synthesis
//! - [`align`]: prompt-built pair supervision and content-encoder alignment
//! - [`model`]: the three-tower recommender and its checkpoints
//! - [`training`]: loss assembly and the staged training loops
//! - [`eval`]: full-ranking metrics and inference benchmarks

pub mod align;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;
pub mod rng;

pub use error::{Error, Result};
