//! Seeded randomness. Every random draw in the crate flows through a
//! [`ChaCha8Rng`] derived from an explicit 64-bit seed; there is no global RNG.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Stable FNV-1a hash, used to derive per-purpose seed streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a base seed and a purpose tag, so independent
/// components never share a stream.
pub fn child_seed(base: u64, tag: &str) -> u64 {
    fnv1a(tag.as_bytes()) ^ base.rotate_left(17).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// A fresh generator for `(base, tag)`.
pub fn stream(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(base, tag))
}

/// Fills a buffer with N(0, std^2) draws.
pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Uniform integer in `[lo, hi]`.
pub fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Fisher-Yates shuffle driven by the explicit stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
