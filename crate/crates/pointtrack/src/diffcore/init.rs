//! Weight initialization and deterministic RNG helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::real::Real;
use super::tensor::Tensor;

/// Deterministic stream RNG used everywhere randomness is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal sample via Box-Muller (keeps the dependency surface to
/// plain uniform draws, identical across platforms).
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Scaled uniform init for linear / conv weights: U(±1/√fan_in).
pub fn scaled_uniform<R: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<R> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| R::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Normal(0, std) init used for proxy tokens and positional projections.
pub fn normal_init<R: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| R::from_f64(normal_sample(rng) * std))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Uniform values in [lo, hi).
pub fn uniform<R: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| R::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(shape, data).unwrap()
}
