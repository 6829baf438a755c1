//! Finite-difference gradient verification.
//!
//! Central differences with step `h` around each input element give an
//! implementation-independent oracle for any scalar-valued function built
//! from the primitives in this crate. Used throughout the test suites; kept
//! public so downstream layers can verify their own fused backward passes.

use super::{Scalar, Tensor};

/// Default step for f64 oracles.
pub const DEFAULT_H: f64 = 1e-5;

/// Central finite difference of `f` at `x`, element by element.
///
/// `f` must be a pure function of the input data. The returned vector has
/// one entry per element of `x`.
pub fn finite_difference<T: Scalar>(
    x: &Tensor<T>,
    h: f64,
    mut f: impl FnMut(&Tensor<T>) -> T,
) -> Vec<f64> {
    let shape = x.shape().to_vec();
    let base = x.data().to_vec();
    let mut grads = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = T::from_f64(plus[i].to_f64() + h);
        let mut minus = base.clone();
        minus[i] = T::from_f64(minus[i].to_f64() - h);
        let fp = f(&Tensor::from_vec(plus, &shape)).to_f64();
        let fm = f(&Tensor::from_vec(minus, &shape)).to_f64();
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Largest relative error between an analytic gradient and an oracle,
/// with denominators floored to avoid blowups near zero.
pub fn max_rel_error<T: Scalar>(analytic: &[T], oracle: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), oracle.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(oracle)
        .map(|(&a, &o)| {
            let a = a.to_f64();
            (a - o).abs() / a.abs().max(o.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Check dLoss/dLeaf for `leaf` inside the scalar function `f`.
///
/// `f` receives a detached replacement for the leaf and must rebuild the
/// loss from it; the analytic side runs backward on `f(leaf)` itself.
/// Returns the max relative error between the two gradients.
pub fn check_leaf_gradient<T: Scalar>(
    leaf: &Tensor<T>,
    h: f64,
    floor: f64,
    mut f: impl FnMut(&Tensor<T>) -> Tensor<T>,
) -> f64 {
    leaf.zero_grad();
    let loss = f(leaf);
    loss.backward().expect("backward failed in gradcheck");
    let analytic = leaf.grad().expect("leaf has no gradient slot");
    let oracle = finite_difference(leaf, h, |t| f(t).item());
    max_rel_error(&analytic, &oracle, floor)
}
