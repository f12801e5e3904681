//! Seed derivation for reproducible, independent random streams.
//!
//! Every stochastic component of a run owns a private ChaCha stream derived
//! from the run seed and a label path. Streams never alias, so adding or
//! removing consumers (e.g. curve evaluations) cannot perturb training.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a label path.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x5851_f42d_4c95_7f2d);
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

/// A ChaCha stream for the given (base, path).
pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
