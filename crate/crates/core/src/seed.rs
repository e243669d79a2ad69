//! Keyed random streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! a hash of the run seed and a textual key, so results do not depend on the
//! order (or thread) in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
