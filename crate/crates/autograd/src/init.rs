use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normal(0, sqrt(2 / fan_in)) weights, the usual choice ahead of a relu.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}
