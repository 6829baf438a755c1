//! Kernel-level oracle agreement: the production conv3d against a naive
//! nested-loop reference, the transposed conv against the adjoint identity,
//! and the grid-accelerated Hausdorff against brute-force all-pairs.

mod common;

use common::oracle_trials;
use common::{random_vec, rng, to_t};

use volseg_core::layers::{Conv3d, Deconv3d};
use volseg_core::metrics::dice_score;
use volseg_core::Tensor;

#[test]
fn conv3d_matches_naive_reference() {
    oracle_trials::conv_reference_trials(60);
}

#[test]
fn deconv3d_is_exact_adjoint_of_conv3d() {
    oracle_trials::adjoint_trials(60);
}

#[test]
fn hausdorff95_matches_brute_force_exactly() {
    let sentinel_seen = oracle_trials::hausdorff_trials(100);
    // The mask generator produces some empty masks, so the sentinel path is
    // exercised too.
    assert!(sentinel_seen > 0, "no empty-mask trial hit the sentinel path");
}

#[test]
fn deconv_adjoint_on_random_five_cubed_inputs() {
    // Adjoint sanity at the 5^3 scale with stride 1.
    for trial in 0..20 {
        let mut r = rng(4500 + trial);
        let (cin, cout, k, stride) = (2usize, 3usize, 2usize, 1usize);
        let e = 5usize;
        let o = (e - k) / stride + 1;
        let wv = random_vec(&mut r, cout * cin * k * k * k, -1.0, 1.0);
        let xv = random_vec(&mut r, cin * e * e * e, -1.0, 1.0);
        let yv = random_vec(&mut r, cout * o * o * o, -1.0, 1.0);
        let conv = Conv3d::<f32> {
            weight: Tensor::from_vec(to_t(&wv), &[cout, cin, k, k, k]),
            bias: None,
            stride,
            padding: 0,
        };
        let deconv = Deconv3d::<f32> {
            weight: Tensor::from_vec(to_t(&wv), &[cout, cin, k, k, k]),
            stride,
        };
        let x = Tensor::from_vec(to_t::<f32>(&xv), &[1, cin, e, e, e]);
        let y = Tensor::from_vec(to_t::<f32>(&yv), &[1, cout, o, o, o]);
        let lhs: f64 = conv
            .forward(&x)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(deconv.forward(&y).unwrap().data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}

#[test]
fn dice_hand_count_cases_exact() {
    // P = one voxel, G = two voxels sharing one: 2*1/(1+2)
    let p = vec![true, false, false, false];
    let g = vec![true, true, false, false];
    assert_eq!(dice_score(&p, &g).unwrap(), 2.0 / 3.0);
    assert_eq!(dice_score(&g, &g).unwrap(), 1.0);
    let d = vec![false, false, true, true];
    assert_eq!(dice_score(&p, &d).unwrap(), 0.0);
}
