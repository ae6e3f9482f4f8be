use rand::Rng;

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Uniform initialization in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<S: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Taps of `Σ θ_k L^k` along the last axis: a pass-through `θ_0 = 1` plus
/// uniform noise in `[-a, a]` scaled by `2^-k`, so no order dominates while
/// the spectrum of `L` lies in `[0, 2]`.
pub fn poly_filter_uniform<S: Scalar>(shape: &[usize], a: f64, rng: &mut impl Rng) -> Tensor<S> {
    let k = *shape.last().expect("filter shape has an order axis");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let order = i % k;
            let pass = if order == 0 { 1.0 } else { 0.0 };
            S::lit(pass + rng.random_range(-a..=a) * 0.5f64.powi(order as i32))
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
