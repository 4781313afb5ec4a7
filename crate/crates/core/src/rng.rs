//! Seeded random sources shared by fixtures, initializers and tests.

use alloc::vec::Vec;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with entries drawn uniformly from `[lo, hi)`.
pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("uniform: positive shape")
}

/// Normally distributed entries with mean zero.
pub fn normal(rng: &mut Rng, shape: &[usize], std_dev: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std_dev * z
        })
        .collect();
    Tensor::from_vec(shape, data).expect("normal: positive shape")
}

pub fn range_usize(rng: &mut Rng, lo: usize, hi_inclusive: usize) -> usize {
    rng.random_range(lo..=hi_inclusive)
}
