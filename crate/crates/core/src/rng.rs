//! Seeded random substreams.
//!
//! Every random draw in the engine comes from a stream keyed by
//! `(master seed, purpose label, index)`, so simulation, initialization and
//! noise draws can be reproduced independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type RngStream = ChaCha8Rng;

/// Derives the substream for `(seed, label, index)`.
pub fn substream(seed: u64, label: &str, index: u64) -> RngStream {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Draws a fresh 64-bit seed from a stream; used to fan a stream out further.
pub fn child_seed(rng: &mut RngStream) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
