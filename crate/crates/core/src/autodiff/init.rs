use rand::Rng as _;

use super::tensor::Tensor;
use crate::real::Real;
use crate::rng::Rng;

/// Kaiming-uniform initialization, bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// Uniform entries in `[-scale, scale)`.
pub fn uniform<T: Real>(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-scale..scale)))
}
