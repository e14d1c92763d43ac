//! Variable-input channel charting.
//!
//! A set-based localization network that maps any subset of per-antenna
//! channel impulse responses (CIRs) to a 2D chart position, trained with a
//! Siamese pseudo-distance loss. The crate carries everything needed to run
//! it end to end on synthetic data: a small reverse-mode autodiff engine, the
//! layers, a multipath CIR simulator, pseudo-distance metrics, training with
//! antenna masking, and affine-aligned evaluation sweeps.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Child seed for a named stage: stable across platforms and releases.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
