//! Deterministic sub-seed derivation.
//!
//! All randomness in the crate flows from a single root seed. Experiments
//! derive per-replication seeds by hashing the root seed together with a
//! label and indices, so replications are independent of scheduling and
//! individually re-executable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a 256-bit RNG seed from a root seed, a label, and indices.
pub fn derive(root: u64, label: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    hasher.finalize().into()
}

/// RNG seeded from a root seed plus derivation path.
pub fn rng(root: u64, label: &str, indices: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(derive(root, label, indices))
}

/// RNG seeded directly from a u64 (for single-shot CLI operations).
pub fn rng_from_u64(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
