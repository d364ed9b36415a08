//! Deterministic random streams.
//!
//! All stochastic operations in the crate draw from [`Stream`], a ChaCha8
//! generator with a few convenience samplers. Per-sample work is keyed by
//! `Stream::for_sample(seed, index)` so data generation is independent of
//! iteration order and regenerable bit-exactly from `(seed, index)`.

use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Seeded random stream used throughout training and data generation.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
    // Box-Muller produces pairs; the spare half is kept for the next call.
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { rng: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    /// Stream for one sample of a dataset, decorrelated from its neighbors.
    pub fn for_sample(seed: u64, index: u64) -> Self {
        // SplitMix64-style mix keeps adjacent (seed, index) pairs apart.
        let mut k = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        k ^= k >> 30;
        k = k.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        k ^= k >> 27;
        k = k.wrapping_mul(0x94d0_49bb_1331_11eb);
        k ^= k >> 31;
        Stream::new(k)
    }

    /// Derive an independent sub-stream, advancing this one.
    pub fn fork(&mut self) -> Self {
        Stream::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free mapping is fine here: streams are not
        // adversarial and n is tiny compared to 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Bernoulli draw.
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = core::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
