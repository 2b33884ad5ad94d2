//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator whose 32-byte key is the SHA-256 digest
//! of a purpose tag, an identifier and a 64-bit seed. Distinct
//! `(tag, id, seed)` triples therefore get independent streams, and the same
//! triple always reproduces the same stream on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

pub fn stream(tag: &str, id: &str, seed: u64) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update((id.len() as u64).to_le_bytes());
    hasher.update(id.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
