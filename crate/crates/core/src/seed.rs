//! Seed derivation.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] built from an
//! explicit base seed plus a purpose tag and an index, so that results do not
//! depend on the order in which independent pieces of work are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a purpose tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    tag.bytes()
        .fold(mix64(seed), |acc, b| mix64(acc ^ u64::from(b)))
}

/// A ChaCha stream keyed by `(seed, stream)`; distinct streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
