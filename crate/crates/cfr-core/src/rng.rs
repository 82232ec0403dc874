//! Seeded, splittable randomness for dataset generation, initialization and
//! shuffling.
//!
//! Everything draws from ChaCha8 keyed by a user seed, with independent
//! substreams selected by a stream id (image index, epoch number, ...). The
//! u64-to-float and Gaussian conversions are spelled out here rather than
//! delegated, so the byte streams written by the generator stay reproducible
//! across platforms and toolchain updates.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_POW_NEG53: f64 = 1.0 / (1u64 << 53) as f64;

/// Deterministic random source: ChaCha8 keyed by `seed`, positioned on
/// substream `stream`.
#[derive(Debug, Clone)]
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn from_seed_stream(seed: u64, stream: u64) -> DetRng {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        DetRng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1): top 53 bits of one u64 draw.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG53
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, n). Widening-multiply reduction; the residual
    /// bias is below 2^-64 per draw.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller. Two u64 draws per sample; the sine
    /// half of the pair is discarded so the draw count per sample is fixed.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG53; // (0, 1]
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
