//! Seed derivation. Every random choice in the crate draws from a ChaCha
//! stream whose seed is mixed from a base seed and a purpose path, so
//! independent stages never share or perturb each other's streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes.
pub mod purpose {
    pub const INIT: u64 = 0x1717;
    pub const SHUFFLE: u64 = 0x5a5a;
    pub const MEMORY_BATCH: u64 = 0x3e3e;
    pub const AUGMENT: u64 = 0xa0a0;
    pub const EXEMPLARS: u64 = 0xe8e8;
    pub const SOURCE: u64 = 0x50c0;
    pub const CLASS_ORDER: u64 = 0xc1a5;
    pub const DATA: u64 = 0xda7a;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of stream keys.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_for(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}
