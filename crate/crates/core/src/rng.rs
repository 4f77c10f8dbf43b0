//! Seeded, splittable randomness for initialization and data synthesis.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from this generator's seed and `stream`,
    /// without advancing `self`.
    pub fn split(&self, stream: u64) -> Self {
        let mut child = self.inner.clone();
        child.set_stream(stream.wrapping_add(1));
        child.set_word_pos(0);
        Self { inner: child }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = self.uniform(lo, hi));
        t
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = std * self.normal());
        t
    }
}
