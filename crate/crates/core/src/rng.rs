//! Seed plumbing. Every stochastic routine receives an explicit seed and
//! builds its own generator; streams for sub-tasks are derived, never shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Fresh generator for `seed`.
pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministically derives an independent seed for sub-stream `stream`.
///
/// Uses the splitmix64 finalizer over `seed ^ golden * (stream + 1)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named streams so that call sites cannot collide by accident.
pub mod stream {
    pub const NOISE: u64 = 1;
    pub const KEY_NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const DATA: u64 = 4;
    pub const PARAMS: u64 = 5;
    pub const QUEUE: u64 = 6;
    pub const LATENT: u64 = 7;
    pub const EXTRACTOR: u64 = 8;
}
