//! Deterministic sub-seed derivation.
//!
//! Every parallel work unit draws its generator from `(seed, stream)` so
//! results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a stream index.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(GOLDEN).wrapping_add(1)))
}

/// Stream tags used across the crate, kept apart so different consumers of
/// the same parent seed never share a generator.
pub mod stream {
    pub const SPATIAL: u64 = 1;
    pub const SLOPES: u64 = 2;
    pub const OUTER_FOLDS: u64 = 3;
    pub const INNER_FOLDS: u64 = 4;
    pub const COHORT: u64 = 5;
    pub const PATIENT: u64 = 6;
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
