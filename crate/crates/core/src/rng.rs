//! Counter-based stream derivation.
//!
//! Every random stream used by a run is derived from the master seed plus a
//! path of integer tags (repetition, iteration, record index, ...). Streams
//! never depend on the order in which work is scheduled, so parallel and
//! sequential execution produce identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream handed to models and samplers.
pub type Stream = ChaCha8Rng;

/// Domain tags separating the different consumers of randomness.
pub mod tag {
    pub const REPETITION: u64 = 0x5245_5045;
    pub const ITERATION: u64 = 0x4954_4552;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const RECORD: u64 = 0x5245_4344;
    pub const SELECT: u64 = 0x5345_4c45;
    pub const RESTART: u64 = 0x5253_5452;
    pub const ORDER: u64 = 0x4f52_4452;
    pub const BASELINE: u64 = 0x4241_5345;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `path` into `seed`, producing a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Builds the stream identified by `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
