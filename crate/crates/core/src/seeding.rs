//! Seed derivation for reproducible parallel work.
//!
//! Every stochastic component takes an explicit seed derived from a master
//! seed and a fixed tag path. Parallel maps (dataset records, decoder
//! dropout masks) each get their own derived generator, so results are
//! bitwise independent of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche behavior for seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    rng_from_seed(derive_seed(base, tags))
}
