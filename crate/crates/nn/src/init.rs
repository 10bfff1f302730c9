//! Parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Glorot/Xavier bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded Xavier-uniform tensor.
pub fn xavier_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    xavier_uniform_with(shape, fan_in, fan_out, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Xavier-uniform tensor drawn from a caller-owned stream.
///
/// Values are sampled in `f64` and then converted, so `f32` and `f64`
/// models built from the same stream agree up to rounding.
pub fn xavier_uniform_with<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(NnError::InvalidArgument(format!(
            "xavier init needs positive fans, got {fan_in}/{fan_out}"
        )));
    }
    let bound = xavier_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}
