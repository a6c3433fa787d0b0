//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a base
//! seed mixed with a stream tag (and an index such as an epoch or repetition),
//! so results never depend on platform or call order across streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct tags give statistically independent generators.
pub mod stream {
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const INIT: u64 = 0x494e_4954;
    pub const MINE_GENUINE: u64 = 0x4d47_454e;
    pub const MINE_IMPOSTER: u64 = 0x4d49_4d50;
    pub const BATCH: u64 = 0x4241_5443;
    pub const VERIFY: u64 = 0x5645_5246;
    pub const DISTRACTOR: u64 = 0x4449_5354;
    pub const INJURY_MODES: u64 = 0x494e_4a4d;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `base` with a stream tag and an index into a new seed.
pub fn derive(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ tag) ^ index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tag: u64, index: u64) -> Rng {
    rng(derive(base, tag, index))
}
