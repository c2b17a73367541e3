//! Seeded randomness with a fixed, documented algorithm so that seeds
//! reproduce across platforms and implementations.
//!
//! The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! On top of the raw `u64` stream:
//!
//! * `below(n)` draws `x = next_u64()` and rejects while
//!   `x >= floor(2^64 / n) * n`, returning `x % n`;
//! * `unit()` returns `((next_u64() >> 11) + 0.5) * 2^-53`, strictly
//!   inside (0, 1);
//! * sampling without replacement is a forward partial Fisher-Yates:
//!   for `i` in `0..k`, swap position `i` with `i + below(n - i)`.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Deterministic random source used throughout the crate.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = (u64::MAX / n) * n;
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform real strictly inside (0, 1).
    pub fn unit(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.next_u64() >> 63 == 1
    }

    /// Standard normal deviate (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.unit();
        let u2 = self.unit();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Shuffles `items` in place and leaves a uniform `k`-sample without
    /// replacement in `items[..k]`.
    pub fn partial_shuffle<T>(&mut self, items: &mut [T], k: usize) {
        let n = items.len();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            items.swap(i, j);
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        self.partial_shuffle(items, n);
    }

    /// `k` distinct indices from `0..n` in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.partial_shuffle(&mut idx, k);
        idx.truncate(k);
        idx
    }
}
