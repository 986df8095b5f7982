//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed mixed with a path of stream identifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of stream tags into an independent seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags, so call sites cannot collide by accident.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const ENSEMBLE: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const MASK: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const MEMBER: u64 = 8;
    pub const TRANSFER: u64 = 9;
}
