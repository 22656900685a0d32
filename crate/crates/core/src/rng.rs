//! Seeded random streams.
//!
//! Every random draw in the crate comes from a xoshiro256** generator seeded
//! through [`stream`], so a `(seed, purpose)` pair always yields the same
//! sequence.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng64;

/// Stream tags, kept distinct so that one seed can drive several
/// independent consumers.
pub mod purpose {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE_HEAD: u64 = 0x10;
    pub const SHUFFLE_FINETUNE: u64 = 0x11;
    pub const SHUFFLE_PRETRAIN: u64 = 0x12;
    pub const HEAD_INIT: u64 = 0x20;
    pub const CROPS: u64 = 0x30;
    pub const SYNTH: u64 = 0x40;
    pub const SPLIT: u64 = 0x50;
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag))
}

pub fn stream(seed: u64, tag: u64) -> Rng64 {
    Rng64::seed_from_u64(derive(seed, tag))
}
