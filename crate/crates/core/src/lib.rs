//! Masked generative modeling over discrete token streams.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithmic
//! piece of the two-stage pipeline:
//!
//! - [`numerics`]: dense arrays, a reverse-mode tape, AdamW, seeded RNG streams
//! - [`quantizers`]: single-codebook VQ and residual VQ with EMA training
//! - [`mgm`]: mask schedule, masked loss, confidence-based iterative decoding, CFG
//! - [`net`]: bidirectional pre-norm transformer predictor
//! - [`adaptation`]: prefix and frame-level conditions, adapters, LoRA
//! - [`training`]: pre-training, task fine-tuning and multi-task scheduling
//! - [`acoustic`]: layer-by-layer RVQ token generation from SSL tokens
//! - [`toyworld`]: synthetic speech-like corpora with exact oracle readouts
//!
//! File formats, configuration and the command line live in the `maskgen`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod acoustic;
pub mod adaptation;
pub mod error;
pub mod mgm;
pub mod net;
pub mod numerics;
pub mod quantizers;
pub mod toyworld;
pub mod training;

pub use error::{Error, Result};
