//! Seeded RNG streams.
//!
//! Every independent unit of work (a sample chain, a permutation replicate,
//! a training run) draws from its own ChaCha stream keyed by `(seed, index)`,
//! so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Derives a sub-seed for a named purpose so that stages sharing a base seed
/// do not reuse each other's streams.
pub fn derive(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose tag, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
