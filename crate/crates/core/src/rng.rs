//! Seed derivation. Every random stream in the crate comes from a global
//! seed plus a label path, so adding a consumer never shifts another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn seeded(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    let bytes: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(bytes)
}

/// Derives a child seed (e.g. one per run of a multi-seed protocol).
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    use rand::RngCore;
    seeded(seed, labels).next_u64()
}
