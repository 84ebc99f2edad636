//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Uniform in `±bound`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Glorot-uniform: `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Normal with mean zero.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
    t
}
