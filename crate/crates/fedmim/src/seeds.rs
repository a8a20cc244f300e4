//! Counter-based derivation of independent RNG streams.
//!
//! Every random draw in the simulator comes from a `ChaCha8Rng` whose seed is
//! derived from the master seed plus a fixed tag path. Two consequences:
//! results never depend on the order in which clients are scheduled, and any
//! component (a test oracle, a replay) can re-derive the exact stream a
//! training loop consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags. Each top-level consumer of randomness gets its own constant so
/// streams never collide across subsystems.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const PARTITION_SHUFFLE: u64 = 3;
    pub const LABEL_SPLIT: u64 = 4;
    pub const SELECT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const MASK: u64 = 7;
    pub const AUGMENT: u64 = 8;
    pub const SYNTH: u64 = 9;
    pub const KMEANS: u64 = 10;
    pub const EVAL_MASK: u64 = 11;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse `(master, tags...)` into a single 64-bit seed.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    h
}

/// A deterministic stream for the given tag path.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}
