//! Seeded randomness.
//!
//! Every stochastic component in the repo draws from a [`SeedRng`]: a
//! ChaCha8 counter-based stream seeded from a single `u64`. Reproducibility
//! is a hard requirement, so thread-local or OS entropy is never used.
//! Independent substreams are derived with [`derive`] so that, e.g., corpus
//! generation and sampling never share a stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic RNG handed around explicitly.
#[derive(Clone, Debug)]
pub struct SeedRng(ChaCha8Rng);

/// Derives an independent stream seed from a master seed and a stream tag.
///
/// SplitMix64 finalizer; stable across platforms and releases.
pub fn derive(master: u64, tag: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Substream for a named stage, independent of this stream's position.
    pub fn substream(seed: u64, tag: u64) -> Self {
        SeedRng::new(derive(seed, tag))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Uniform integer in [lo, hi].
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.0.gen_range(lo..=hi)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Vector of normal draws scaled by `std`.
    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    /// Bernoulli draw.
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
