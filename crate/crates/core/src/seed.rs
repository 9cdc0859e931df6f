//! Counter-based seed expansion.
//!
//! Every random stream in the toolkit is derived from one top-level seed and a
//! stream identifier, so any stage can be rerun on its own and still see the
//! same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers used across the crate.
pub mod stream {
    pub const SYNTH_MEANS: u64 = 1;
    pub const SYNTH_TRAIN: u64 = 2;
    pub const SYNTH_DEV: u64 = 3;
    pub const SYNTH_TEST_ID: u64 = 4;
    pub const SYNTH_TEST_OOD: u64 = 5;
    pub const SYNTH_OOD_SHIFT: u64 = 6;
    pub const SYNTH_LAYERS: u64 = 7;
    pub const SYNTH_SPANS: u64 = 8;
    pub const IVF: u64 = 16;
    pub const PQ: u64 = 17;
    pub const DENSITY: u64 = 18;
    pub const BENCH: u64 = 19;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of stream `id` from a top-level seed.
pub fn derive(seed: u64, id: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ id.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// A ChaCha8 generator for stream `id` of `seed`.
pub fn rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, id))
}
