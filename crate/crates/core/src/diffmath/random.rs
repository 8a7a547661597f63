//! Seedable random streams. Every stochastic routine takes an explicit `&mut Rng`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream; advances the parent by one draw.
pub fn fork(rng: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(rng.random::<u64>())
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| low + (high - low) * rng.random::<f64>()).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
