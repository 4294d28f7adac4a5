//! Seeded randomness.
//!
//! Every randomized operation in the toolkit takes an explicit seed and draws
//! from a ChaCha8 stream, so results are reproducible across runs and
//! platforms. Nested consumers (per-step, per-clip, per-frame) derive child
//! seeds with [`derive_seed`] instead of sharing a stream, which keeps the
//! draw sequence independent of evaluation order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used throughout the crate.
pub type SeedRng = ChaCha8Rng;

/// Build an RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a base seed and a path of indices.
///
/// SplitMix64-style mixing; identical (base, path) always yields the same
/// child, and distinct paths decorrelate.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base;
    for &p in path {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        state = splitmix64(state);
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller; implemented locally so the exact
/// sequence is pinned by this crate rather than an external distribution
/// implementation.
pub fn next_gaussian(rng: &mut SeedRng) -> f64 {
    // Rejection-free polar-less form: u1 in (0, 1], u2 in [0, 1).
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
