//! Named random streams.
//!
//! Every consumer of randomness asks for a stream by `(seed, name)`. The
//! stream key is a SHA-256 digest of both, fed to ChaCha8 (a counter-based
//! generator), so streams with different names never overlap and adding a
//! new consumer never perturbs an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

pub fn stream_key(seed: u64, name: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.finalize().into()
}

pub fn stream(seed: u64, name: &str) -> Stream {
    ChaCha8Rng::from_seed(stream_key(seed, name))
}

/// Derives a child seed, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let key = stream_key(seed, name);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}
