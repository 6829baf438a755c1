//! Seeded oracle-agreement trial loops, shared between the kernel-oracle
//! tests and the acceptance suite.

use rand::Rng;

use volseg_core::layers::{Conv3d, Deconv3d};
use volseg_core::metrics::hausdorff95;
use volseg_core::Tensor;

use super::{conv3d_reference, hausdorff95_reference, random_mask, random_vec, rng, to_t};

/// Production conv3d against the naive reference over random geometries;
/// relative error must stay below 1e-5.
pub fn conv_reference_trials(trials: u64) {
    for trial in 0..trials {
        let mut r = rng(3000 + trial);
        let (b, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let k = [1usize, 2, 3][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let pad = if k == 1 { 0 } else { r.gen_range(0..=1) };
        let e = r.gen_range(k.max(3)..=8);
        let xv = random_vec(&mut r, b * cin * e * e * e, -1.0, 1.0);
        let wv = random_vec(&mut r, cout * cin * k * k * k, -1.0, 1.0);
        let bv = random_vec(&mut r, cout, -0.5, 0.5);

        let conv = Conv3d::<f32> {
            weight: Tensor::from_vec(to_t(&wv), &[cout, cin, k, k, k]),
            bias: Some(Tensor::from_vec(to_t(&bv), &[cout])),
            stride,
            padding: pad,
        };
        let x = Tensor::from_vec(to_t::<f32>(&xv), &[b, cin, e, e, e]);
        let y = conv.forward(&x).unwrap();

        let (expect, (od, oh, ow)) =
            conv3d_reference(&xv, &wv, Some(&bv), b, cin, cout, (e, e, e), k, stride, pad);
        assert_eq!(y.shape(), &[b, cout, od, oh, ow]);
        let scale = expect.iter().fold(1e-9f64, |m, &v| m.max(v.abs()));
        for (i, (&got, &want)) in y.data().iter().zip(&expect).enumerate() {
            let rel = (got as f64 - want).abs() / scale;
            assert!(
                rel < 1e-5,
                "conv oracle trial {trial} elem {i}: got {got}, want {want} (rel {rel:.2e})"
            );
        }
    }
}

/// `<conv(x), y> == <x, deconv(y)>` with a shared weight buffer; the conv
/// runs pad 0 with `(e - k)` divisible by the stride so the geometries are
/// exact adjoints.
pub fn adjoint_trials(trials: u64) {
    for trial in 0..trials {
        let mut r = rng(4000 + trial);
        let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let o = r.gen_range(1..=3usize);
        let e = (o - 1) * stride + k;

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

        let cx = conv.forward(&x).unwrap();
        let dy = deconv.forward(&y).unwrap();
        let lhs: f64 = cx
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        assert!(
            (lhs - rhs).abs() / scale < 1e-4,
            "adjoint trial {trial}: {lhs} vs {rhs}"
        );
    }
}

/// Grid-accelerated HD95 against brute-force all-pairs, exact equality.
/// Returns how many trials hit the empty-mask sentinel path.
pub fn hausdorff_trials(trials: u64) -> usize {
    let mut sentinel_seen = 0usize;
    for seed in 0..trials {
        let mut r = rng(5000 + seed);
        let e = r.gen_range(4..=16usize);
        let extent = (e, e, e);
        let spacing = (
            r.gen_range(0.5f32..2.0),
            r.gen_range(0.5f32..2.0),
            r.gen_range(0.5f32..2.0),
        );
        let pred = random_mask(&mut r, extent);
        let gt = random_mask(&mut r, extent);
        let got = hausdorff95(&pred, &gt, extent, spacing).unwrap();
        let want = hausdorff95_reference(&pred, &gt, extent, spacing);
        assert_eq!(
            got.value, want,
            "hausdorff seed {seed}: grid {} vs brute force {want}",
            got.value
        );
        if got.sentinel {
            sentinel_seen += 1;
        }
    }
    sentinel_seen
}
