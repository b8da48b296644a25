//! Non-exemplar class-incremental learning with retrospective feature synthesis.
//!
//! Old classes are never replayed from raw samples. After every task the
//! engine stores a full-covariance Gaussian over each learned class's
//! features; while learning later tasks it draws the most likely of `K`
//! candidates per old class, blends each draw with its most cosine-similar
//! current-batch feature, and feeds the result to the unified classifier
//! alongside feature- and logit-level distillation against the previous
//! model.
//!
//! The crate is `no_std` (with `alloc`); file formats, configuration parsing
//! and the command line live in the `retrofeat` companion crate.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, reverse-mode gradients, Cholesky, Adam.
//! - [`synthdata`]: deterministic grating images and the `B + C x T` split.
//! - [`model`]: MLP feature extractor with unified and rotation heads.
//! - [`gaussmem`]: per-class statistics and likelihood-ranked sampling.
//! - [`compensate`]: feature generation and compensation strategies.
//! - [`engine`]: the per-task training loop and evaluation.
//! - [`metrics`]: accuracy matrix and incremental-learning metrics.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod compensate;
pub mod engine;
mod error;
pub mod gaussmem;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthdata;

pub use error::{Error, Result};

/// Deterministic generator used for every random draw in a run.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a [`Rng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
