use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The one random source used across the engine: ChaCha8 seeded from a
/// `u64`, with normals drawn by the Box-Muller transform. Both are fixed so
/// identical seeds give identical streams on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in the inclusive range `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Standard normal.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let radius = num_traits::Float::sqrt(-2.0 * num_traits::Float::ln(u1));
        let angle = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(radius * num_traits::Float::sin(angle));
        radius * num_traits::Float::cos(angle)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}
