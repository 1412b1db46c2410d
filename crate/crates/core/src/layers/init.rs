use rand::Rng;

use crate::tensor::Tensor;

/// Glorot-uniform initialization.
pub fn xavier<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}
