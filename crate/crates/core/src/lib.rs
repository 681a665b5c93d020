//! Desk-scale encoder-decoder language model lab.
//!
//! The crate implements, end to end and at a size where everything can be
//! verified on a laptop CPU:
//!
//! - a minimal dense tensor kernel with reverse-mode gradients ([`tensor`],
//!   [`tape`], [`gradcheck`]),
//! - merged self/cross attention with grouped-query heads, QK normalization
//!   and dual-base rotary positions ([`attention`]),
//! - the encoder-decoder model with tied embeddings, local/global layer
//!   interleaving and a frozen vision-token path ([`model`]),
//! - a mixture-of-denoisers span-corruption data pipeline with a binary
//!   shard format ([`ul2`], [`shard`]),
//! - checkpoint adaptation from decoder-only parameter maps, checkpoint
//!   averaging and a bit-exact checkpoint file format ([`ckpt`]),
//! - a toy training loop (cosine schedule, global-norm clipping, decoupled
//!   weight decay) and small evaluation probes ([`training`]).
//!
//! Everything is computed in f64. Batch work (per-example gradients, shard
//! preprocessing) runs data-parallel through rayon when the default
//! `parallel` feature is enabled and falls back to sequential loops without
//! it; results are bitwise identical either way.

pub mod attention;
pub mod ckpt;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod rng;
pub mod shard;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod ul2;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Tensor;
