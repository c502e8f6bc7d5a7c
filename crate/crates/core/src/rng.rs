//! Seed derivation.
//!
//! Every stochastic component draws from its own ChaCha stream keyed by the
//! run seed and a component tag, so enabling one component never shifts the
//! random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a sequence of tags.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, tags))
}

/// Component tags used with [`derive`].
pub mod tag {
    pub const ENCODER_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const PROTO_INIT: u64 = 3;
    pub const PROJECTOR_INIT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const CLUSTER: u64 = 7;
    pub const ADAPTER: u64 = 8;
    pub const BUFFER: u64 = 9;
    pub const ESTIMATE: u64 = 10;
    pub const SCENARIO: u64 = 11;
    pub const SPLIT: u64 = 12;
}
