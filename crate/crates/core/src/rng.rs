//! Keyed random streams: every consumer derives its own generator from the
//! run seed plus a path of integer keys, so parallel and resumed runs draw
//! exactly the same numbers as serial ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `keys` into `seed`.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// A generator for the stream named by `keys` under `seed`.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const CORPUS: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const PAIR: u64 = 3;
    pub const INIT: u64 = 4;
    pub const STEP: u64 = 5;
    pub const ORDER: u64 = 6;
    pub const RESEED: u64 = 7;
    pub const LM: u64 = 8;
    pub const GRAMMAR: u64 = 9;
}
