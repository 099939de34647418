//! Seeded random streams.
//!
//! Every consumer receives an explicit [`SeededRng`]; nothing reads global
//! state. Independent sub-streams are obtained with [`SeededRng::derive`], which
//! mixes the parent seed with a stream index, so a resample or a training run
//! identified by `(seed, index)` draws the same numbers regardless of the order
//! in which sibling streams are consumed.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream keyed by a 64-bit seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `stream`; depends only on `(self.seed, stream)`.
    pub fn derive(&self, stream: u64) -> SeededRng {
        SeededRng::new(mix64(self.seed ^ mix64(stream.wrapping_add(0x5EED))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Poisson draw with mean `lambda`; `lambda <= 0` yields 0.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if !(lambda > 0.0) {
            return 0;
        }
        let dist = Poisson::new(lambda).expect("positive finite Poisson mean");
        dist.sample(&mut self.inner) as u64
    }

    /// `count` independent indices drawn with probability proportional to
    /// `weights`. Panics when the weights are empty, negative or all zero.
    pub fn categorical(&mut self, weights: &[f64], count: usize) -> Vec<usize> {
        let dist = WeightedIndex::new(weights).expect("valid categorical weights");
        (0..count).map(|_| dist.sample(&mut self.inner)).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Seeded permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
