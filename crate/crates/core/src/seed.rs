//! Deterministic derivation of independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes an ordered list of integers into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5053_4154_u64, |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Purpose tags keep streams drawn for different jobs apart.
pub mod purpose {
    pub const SHUFFLE: u64 = 1;
    pub const ATTACK: u64 = 2;
    pub const MEMBER: u64 = 3;
    pub const DATA_TRAIN: u64 = 4;
    pub const DATA_TEST: u64 = 5;
    pub const DATA_PATTERN: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const FLIP: u64 = 8;
}
