//! Deterministic RNG streams.
//!
//! Every random decision in the crate draws from a ChaCha stream derived from
//! the master seed plus a purpose tag (and optionally loop indices). Streams
//! are independent of evaluation order, so adding or removing a consumer in
//! one part of the pipeline does not shift the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard 64-bit finalizer used to decorrelate seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds the parts into a single well-mixed 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x6a09_e667_f3bc_c909; // sqrt(2) fraction, arbitrary non-zero start
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// RNG stream for a (master seed, purpose tag) pair.
pub fn stream(master: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[master, tag]))
}

/// RNG stream additionally keyed by two loop indices (iteration, item).
pub fn substream(master: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[master, tag, a, b]))
}

/// Purpose tags. Values are arbitrary but frozen: changing one changes every
/// downstream artifact byte-for-byte.
pub mod tag {
    pub const DEMO_GEN: u64 = 0x01;
    pub const POLICY_INIT: u64 = 0x02;
    pub const TRANSITION_INIT: u64 = 0x03;
    pub const PREFILL: u64 = 0x04;
    pub const PRETRAIN: u64 = 0x05;
    pub const BATCH: u64 = 0x06;
    pub const POSTERIOR: u64 = 0x07;
    pub const ROLLOUT: u64 = 0x08;
    pub const TRANSITION_UPDATE: u64 = 0x09;
    pub const EVAL: u64 = 0x0a;
    pub const BC: u64 = 0x0b;
    pub const PLAN: u64 = 0x0c;
    pub const VERIFY: u64 = 0x0d;
}
