//! Root-seed expansion.
//!
//! Every stage draws from its own ChaCha8 stream whose seed is the first
//! eight bytes (little endian) of `SHA-256(root_seed.to_le_bytes() || label)`.
//! Labels are fixed strings such as `"world"` or `"grouper/stage2"`, so adding
//! a stage never perturbs the streams of the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stage_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
