//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed and a path of stream labels, so results never
//! depend on the order in which independent streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream labels into a new 64-bit seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn stream(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream labels used across the crate.
pub mod label {
    pub const INIT: u64 = 1;
    pub const ENV: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const APPROX_DATA: u64 = 4;
    pub const SIGNS: u64 = 5;
    pub const CHECK: u64 = 6;
    pub const BENCH: u64 = 7;
}
