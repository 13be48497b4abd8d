//! Seeded, named random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent stream for `(seed, tags)`; equal inputs give equal streams.
pub fn derived_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Stream tags naming the consumers of randomness.
pub mod tags {
    pub const SPLIT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EPOCH: u64 = 4;
    pub const TEACHER: u64 = 5;
    pub const INSPECT: u64 = 6;
}
