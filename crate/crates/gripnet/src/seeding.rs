//! Deterministic random-stream derivation.
//!
//! Every stochastic component (weight init, shuffling, dropout,
//! augmentation, synthetic data) draws from its own ChaCha stream keyed
//! by `(master seed, tag string)`. Streams for distinct tags are
//! independent, so adding a consumer never shifts the draws seen by
//! another, and a fixed master seed reproduces every stream bit-exactly
//! across runs and platforms.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step: a cheap, well-mixed expansion of one 64-bit state.
pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a over a tag string.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A ChaCha stream keyed by `(master, tag)`.
pub(crate) fn rng_for(master: u64, tag: &str) -> ChaCha8Rng {
    let mut state = master ^ fnv1a(tag);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// One 64-bit label drawn from a `(master, tag)` stream, for handing a
/// sub-seed to components that take a plain integer seed.
pub(crate) fn subseed(master: u64, tag: &str) -> u64 {
    rng_for(master, tag).next_u64()
}

/// Uniform draw in the open interval (0, 1) with 53-bit resolution.
pub(crate) fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw via the Box-Muller transform.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = unit_open(rng);
    let u2 = unit_open(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
