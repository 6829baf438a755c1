//! Parameter initialization, reproducible from a seed.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Scalar;

/// Kaiming-normal with fan-in: N(0, 2 / fan_in).
pub fn kaiming_normal<T: Scalar>(rng: &mut ChaCha12Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect()
}

/// Xavier-uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<T: Scalar>(
    rng: &mut ChaCha12Rng,
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.gen_range(-a..a))).collect()
}
