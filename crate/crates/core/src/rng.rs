//! Portable seeded randomness.
//!
//! All randomness derives from ChaCha8 (the `rand_chacha` stream cipher RNG),
//! which produces identical streams on every platform. Child streams are keyed by
//! hashing a parent seed with a label so independent consumers never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Version tag of the randomness scheme; bump if stream derivation changes.
pub const RNG_SCHEME: &str = "chacha8-sha256-v1";

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn child_rng(seed: u64, label: &str) -> Rng {
    rng_from_seed(derive_seed(seed, label))
}
