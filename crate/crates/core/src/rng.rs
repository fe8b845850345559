//! Deterministic seed derivation.
//!
//! Every randomized routine takes an explicit `u64` seed. A master seed is
//! split into independent streams with a fixed SplitMix64 hash of
//! (master, stream label), so reruns with the same master seed reproduce every
//! byte of output regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard finalizer constants.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of a named stream from a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = splitmix64(master);
    for b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(*b));
    }
    h
}

/// Derive the seed of the `index`-th shard of a named stream.
pub fn derive_indexed_seed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, label) ^ splitmix64(index))
}

/// Stream cipher RNG; identical output on every platform.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
