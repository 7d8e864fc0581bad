//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! parent seed and a label. The split function is
//!
//! ```text
//! child = first 8 bytes (little-endian) of SHA-256(parent_le_bytes || label_utf8)
//! ```
//!
//! so streams for different stages or chains never overlap and do not depend
//! on the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a child seed from `parent` and a label.
pub fn split_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Derive a child seed for an indexed stream (chains, folds, draws).
pub fn split_index(parent: u64, label: &str, index: u64) -> u64 {
    split_seed(split_seed(parent, label), &index.to_string())
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(parent: u64, label: &str) -> Rng {
    rng_from_seed(split_seed(parent, label))
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
