//! Seed derivation. Every random stream in the simulator is a ChaCha8 stream
//! keyed by a 64-bit value mixed from the experiment seed and a few salts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix(seed: u64, salts: &[u64]) -> u64 {
    salts.iter().fold(splitmix(seed), |acc, &s| splitmix(acc ^ splitmix(s)))
}

pub(crate) fn rng(seed: u64, salts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salts))
}
