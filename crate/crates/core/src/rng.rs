//! Seed derivation for reproducible sub-streams.
//!
//! Every randomized stage (dataset scene, augmentation policy, epoch shuffle,
//! per-sample variant pick) derives its own generator as a pure function of
//! the run seed plus a few stream identifiers, so parallel batch assembly can
//! never change what gets sampled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with stream identifiers into a single 64-bit state.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// Derive an independent generator for the stream `(seed, parts...)`.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}
