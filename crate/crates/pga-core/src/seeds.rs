//! Deterministic derivation of independent RNG streams from a master seed.
//!
//! Every stochastic site in the pipeline owns a stream derived from the
//! master seed plus fixed role tags (and indices such as subject, patch, or
//! epoch), so concurrency and evaluation order can never change draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive combination of seed parts.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243F_6A88_85A3_08D3; // pi fraction, an arbitrary non-zero start
    for &p in parts {
        acc = splitmix(acc ^ splitmix(p));
    }
    acc
}

/// Stream cipher RNG for the given seed parts.
pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Role tags keeping unrelated streams apart even at equal indices.
pub mod tag {
    pub const AGES: u64 = 0xA6E5;
    pub const NOISE: u64 = 0x0153;
    pub const SPLIT: u64 = 0x5137;
    pub const INIT: u64 = 0x1217;
    pub const SHUFFLE: u64 = 0x5FFE;
    /// Patch-index slot used when training the whole-volume baseline.
    pub const BASELINE: u64 = u64::MAX;
}
