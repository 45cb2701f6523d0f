//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! whose seed is mixed from a root seed and a small tuple of stream tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a root seed with stream tags into a new seed.
pub fn derive(root: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(root), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags, kept distinct so that independent draws never share a stream.
pub mod tag {
    pub const CHANNEL_SUBSET: u64 = 1;
    pub const PAIR_ORDER: u64 = 2;
    pub const PCA_SUBSAMPLE: u64 = 3;
    pub const PHANTOM: u64 = 4;
    pub const FIELD: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const ENCODER: u64 = 7;
    pub const HEAD: u64 = 8;
    pub const BLOCK: u64 = 9;
    pub const EVAL_SUBSET: u64 = 10;
    pub const PAIR: u64 = 11;
    pub const INTENSITY: u64 = 12;
}
