//! Seeded, platform-independent random number generation.
//!
//! Every stochastic step in the pipeline (weight init, dropout masks,
//! augmentation, shuffling, splits) draws from [`Rng`], which wraps ChaCha8.
//! The algorithm name is written into checkpoints.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name recorded alongside the seed in checkpoint config blocks.
pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    /// Used so that e.g. augmentation draws do not shift weight-init draws.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        let mut c = Rng::new(8);
        assert_ne!(Rng::new(7).uniform(), c.uniform());
    }

    #[test]
    fn forks_are_distinct_and_reproducible() {
        let base = Rng::new(3);
        let x: Vec<f64> = (0..4).map(|_| 0.0).collect();
        let mut f1 = base.fork(1);
        let mut f1b = base.fork(1);
        let mut f2 = base.fork(2);
        let a: Vec<f64> = x.iter().map(|_| f1.uniform()).collect();
        let b: Vec<f64> = x.iter().map(|_| f1b.uniform()).collect();
        let c: Vec<f64> = x.iter().map(|_| f2.uniform()).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pins the generator: a change of algorithm or crate version that
        // alters the stream shows up here.
        let mut r = Rng::new(0);
        assert_eq!(r.uniform().to_bits(), 0x3fe6_b0be_ecf4_f347);
    }
}
