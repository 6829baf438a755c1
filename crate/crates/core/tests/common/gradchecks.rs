//! Shared finite-difference gradient-check driver: every differentiable
//! primitive and layer at f32 (vs. an f64 oracle, rel. err < 1e-3) and at
//! f64 (rel. err < 1e-6), over seeded trials.

use super::{random_vec, rng, to_t};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use volseg_core::layers::{
    BatchNorm3d, Conv3d, Deconv3d, Dropout, Ffn, LayerNorm, Linear, Mha, Mode, ParamVisit,
    TransformerLayer,
};
use volseg_core::metrics::softmax_dice_loss;
use volseg_core::model::{Model, ModelConfig};
use volseg_core::tensor::gradcheck::{finite_difference, max_rel_error};
use volseg_core::tensor::ops;
use volseg_core::{Scalar, Tensor};

const H: f64 = 1e-6; // oracle step: balances truncation (norm layers are strongly curved) vs f64 roundoff
const TOL_F64: f64 = 1e-6;
const TOL_F32: f64 = 1e-3;
pub const TRIALS: usize = 100;

/// Deterministic projection to a scalar so any output shape can be checked.
fn weighted_sum<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let w: Vec<T> = (0..t.numel())
        .map(|j| T::from_f64((1.7 * j as f64 + 0.3).sin() + 0.1))
        .collect();
    let wt = Tensor::from_vec(w, t.shape());
    ops::sum_all(&ops::mul(t, &wt).expect("same shape")).expect("sum")
}

/// One trial: analytic gradients at f64 and f32 against the f64
/// central-difference oracle, for every input slot.
pub fn check_trial(
    name: &str,
    shapes_data: &[(Vec<usize>, Vec<f64>)],
    apply64: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    apply32: impl Fn(&[Tensor<f32>]) -> Tensor<f32>,
) {
    // Analytic f64 gradients.
    let leaves64: Vec<Tensor<f64>> = shapes_data
        .iter()
        .map(|(s, d)| Tensor::param(d.clone(), s))
        .collect();
    weighted_sum(&apply64(&leaves64)).backward().unwrap();

    // Analytic f32 gradients.
    let leaves32: Vec<Tensor<f32>> = shapes_data
        .iter()
        .map(|(s, d)| Tensor::param(to_t::<f32>(d), s))
        .collect();
    weighted_sum(&apply32(&leaves32)).backward().unwrap();

    // f64 oracles for every slot, other inputs held constant.
    let oracles: Vec<Vec<f64>> = (0..shapes_data.len())
        .map(|slot| {
            finite_difference(&leaves64[slot].detach(), H, |probe| {
                let inputs: Vec<Tensor<f64>> = leaves64
                    .iter()
                    .enumerate()
                    .map(|(i, leaf)| if i == slot { probe.clone() } else { leaf.detach() })
                    .collect();
                volseg_core::no_grad(|| weighted_sum(&apply64(&inputs)).item())
            })
        })
        .collect();
    let trial_scale = oracles
        .iter()
        .flatten()
        .fold(1e-12f64, |m, &v| m.max(v.abs()));

    for (slot, (shape, _)) in shapes_data.iter().enumerate() {
        let oracle = &oracles[slot];
        let slot_scale = oracle.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let g64 = leaves64[slot].grad().unwrap();
        let g32 = leaves32[slot].grad().unwrap();

        if slot_scale <= 1e-7 * trial_scale {
            // Mathematically dead slot (e.g. a bias that a downstream
            // normalization or softmax cancels): the oracle is pure
            // differencing noise, so require the analytic gradient to be
            // negligible at each dtype's own roundoff scale instead.
            let a64 = g64.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            let a32 = g32.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().abs()));
            assert!(
                a64 <= 1e-6 * trial_scale.max(1.0),
                "{name} slot {slot} shape {shape:?}: dead slot has f64 gradient {a64:.3e}"
            );
            assert!(
                a32 <= 1e-3 * trial_scale.max(1.0),
                "{name} slot {slot} shape {shape:?}: dead slot has f32 gradient {a32:.3e}"
            );
            continue;
        }

        let floor = (1e-2 * slot_scale).max(1e-3 * trial_scale).max(1e-10);
        let e64 = max_rel_error(&g64, oracle, floor);
        assert!(
            e64 < TOL_F64,
            "{name} slot {slot} shape {shape:?}: f64 rel err {e64:.3e}"
        );
        let e32 = max_rel_error(&g32, oracle, floor);
        assert!(
            e32 < TOL_F32,
            "{name} slot {slot} shape {shape:?}: f32 rel err {e32:.3e}"
        );
    }
}

fn small_extent(rng: &mut ChaCha12Rng) -> usize {
    rng.gen_range(1..=5)
}

// ── primitives ──────────────────────────────────────────────────────────

pub fn matmul_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(100 + trial as u64);
        let (m, k, n) = (small_extent(&mut r), small_extent(&mut r), small_extent(&mut r));
        let a = (vec![m, k], random_vec(&mut r, m * k, -1.5, 1.5));
        let b = (vec![k, n], random_vec(&mut r, k * n, -1.5, 1.5));
        check_trial(
            "matmul",
            &[a, b],
            |t| ops::matmul(&t[0], &t[1]).unwrap(),
            |t| ops::matmul(&t[0], &t[1]).unwrap(),
        );
    }
}

pub fn batched_matmul_gradients() {
    for trial in 0..TRIALS / 2 {
        let mut r = rng(150 + trial as u64);
        let (b, m, k, n) = (
            r.gen_range(1..=3),
            small_extent(&mut r),
            small_extent(&mut r),
            small_extent(&mut r),
        );
        let a = (vec![b, m, k], random_vec(&mut r, b * m * k, -1.0, 1.0));
        let bb = (vec![b, k, n], random_vec(&mut r, b * k * n, -1.0, 1.0));
        check_trial(
            "batched_matmul",
            &[a, bb],
            |t| ops::matmul(&t[0], &t[1]).unwrap(),
            |t| ops::matmul(&t[0], &t[1]).unwrap(),
        );
    }
}

pub fn elementwise_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(200 + trial as u64);
        let n = r.gen_range(1..=125);
        let a = (vec![n], random_vec(&mut r, n, -1.5, 1.5));
        let b = (vec![n], random_vec(&mut r, n, -1.5, 1.5));
        check_trial(
            "add",
            &[a.clone(), b.clone()],
            |t| ops::add(&t[0], &t[1]).unwrap(),
            |t| ops::add(&t[0], &t[1]).unwrap(),
        );
        check_trial(
            "sub",
            &[a.clone(), b.clone()],
            |t| ops::sub(&t[0], &t[1]).unwrap(),
            |t| ops::sub(&t[0], &t[1]).unwrap(),
        );
        check_trial(
            "mul",
            &[a.clone(), b],
            |t| ops::mul(&t[0], &t[1]).unwrap(),
            |t| ops::mul(&t[0], &t[1]).unwrap(),
        );
        check_trial(
            "scale",
            &[a.clone()],
            |t| ops::scale(&t[0], 0.73),
            |t| ops::scale(&t[0], 0.73),
        );
        check_trial("exp", &[a], |t| ops::exp(&t[0]), |t| ops::exp(&t[0]));
    }
}

pub fn relu_gradient_away_from_kink() {
    for trial in 0..TRIALS {
        let mut r = rng(300 + trial as u64);
        let n = r.gen_range(1..=125);
        // keep |x| > 10h so central differences never straddle the kink
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let sign = if r.gen::<bool>() { 1.0 } else { -1.0 };
                sign * r.gen_range(0.05..1.5)
            })
            .collect();
        check_trial(
            "relu",
            &[(vec![n], data)],
            |t| ops::relu(&t[0]),
            |t| ops::relu(&t[0]),
        );
    }
}

pub fn log_gradient_on_positive_domain() {
    for trial in 0..TRIALS {
        let mut r = rng(400 + trial as u64);
        let n = r.gen_range(1..=64);
        let data = random_vec(&mut r, n, 0.2, 3.0);
        check_trial(
            "log",
            &[(vec![n], data)],
            |t| ops::log(&t[0]).unwrap(),
            |t| ops::log(&t[0]).unwrap(),
        );
    }
}

pub fn add_bias_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(500 + trial as u64);
        let (rows, d) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let x = (vec![rows, d], random_vec(&mut r, rows * d, -1.0, 1.0));
        let b = (vec![d], random_vec(&mut r, d, -1.0, 1.0));
        check_trial(
            "add_bias",
            &[x, b],
            |t| ops::add_bias(&t[0], &t[1]).unwrap(),
            |t| ops::add_bias(&t[0], &t[1]).unwrap(),
        );
    }
}

pub fn reduce_gradients() {
    use volseg_core::tensor::ops::ReduceKind;
    for trial in 0..TRIALS {
        let mut r = rng(600 + trial as u64);
        let shape = vec![small_extent(&mut r), small_extent(&mut r), small_extent(&mut r)];
        let n: usize = shape.iter().product();
        let data = random_vec(&mut r, n, -1.0, 1.0);
        let axis = r.gen_range(0..3);
        let keep = r.gen::<bool>();
        check_trial(
            "reduce_sum",
            &[(shape.clone(), data.clone())],
            move |t| ops::reduce(ReduceKind::Sum, &t[0], &[axis], keep).unwrap(),
            move |t| ops::reduce(ReduceKind::Sum, &t[0], &[axis], keep).unwrap(),
        );
        check_trial(
            "reduce_mean",
            &[(shape, data)],
            move |t| ops::reduce(ReduceKind::Mean, &t[0], &[axis], keep).unwrap(),
            move |t| ops::reduce(ReduceKind::Mean, &t[0], &[axis], keep).unwrap(),
        );
    }
}

pub fn softmax_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(700 + trial as u64);
        let shape = vec![small_extent(&mut r), small_extent(&mut r).max(2)];
        let n: usize = shape.iter().product();
        let data = random_vec(&mut r, n, -2.0, 2.0);
        let axis = r.gen_range(0..2);
        check_trial(
            "softmax",
            &[(shape, data)],
            move |t| ops::softmax(&t[0], axis).unwrap(),
            move |t| ops::softmax(&t[0], axis).unwrap(),
        );
    }
}

pub fn shape_op_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(800 + trial as u64);
        let (a, b, c) = (small_extent(&mut r), small_extent(&mut r), small_extent(&mut r));
        let n = a * b * c;
        let data = random_vec(&mut r, n, -1.0, 1.0);
        check_trial(
            "reshape",
            &[(vec![a, b, c], data.clone())],
            move |t| ops::reshape(&t[0], &[c * b, a]).unwrap(),
            move |t| ops::reshape(&t[0], &[c * b, a]).unwrap(),
        );
        check_trial(
            "permute",
            &[(vec![a, b, c], data.clone())],
            |t| ops::permute(&t[0], &[2, 0, 1]).unwrap(),
            |t| ops::permute(&t[0], &[2, 0, 1]).unwrap(),
        );
        let start = r.gen_range(0..a);
        let len = r.gen_range(1..=a - start);
        check_trial(
            "slice",
            &[(vec![a, b, c], data.clone())],
            move |t| ops::slice(&t[0], 0, start, len).unwrap(),
            move |t| ops::slice(&t[0], 0, start, len).unwrap(),
        );
        check_trial(
            "zero_pad",
            &[(vec![a, b, c], data.clone())],
            |t| ops::zero_pad(&t[0], &[(1, 0), (0, 2), (1, 1)]).unwrap(),
            |t| ops::zero_pad(&t[0], &[(1, 0), (0, 2), (1, 1)]).unwrap(),
        );
        let other = random_vec(&mut r, 2 * b * c, -1.0, 1.0);
        check_trial(
            "concat",
            &[(vec![a, b, c], data), (vec![2, b, c], other)],
            |t| ops::concat(&[&t[0], &t[1]], 0).unwrap(),
            |t| ops::concat(&[&t[0], &t[1]], 0).unwrap(),
        );
    }
}

// ── layers ──────────────────────────────────────────────────────────────

pub fn conv3d_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(900 + trial as u64);
        let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let k = [1usize, 2, 3][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let pad = if k == 1 { 0 } else { r.gen_range(0..=1) };
        let e = r.gen_range(k.max(2)..=5);
        let x = (
            vec![1, cin, e, e, e],
            random_vec(&mut r, cin * e * e * e, -1.0, 1.0),
        );
        let w = (
            vec![cout, cin, k, k, k],
            random_vec(&mut r, cout * cin * k * k * k, -0.8, 0.8),
        );
        let b = (vec![cout], random_vec(&mut r, cout, -0.3, 0.3));
        fn conv<T: Scalar>(t: &[Tensor<T>], stride: usize, pad: usize) -> Tensor<T> {
            let layer = Conv3d {
                weight: t[1].clone(),
                bias: Some(t[2].clone()),
                stride,
                padding: pad,
            };
            layer.forward(&t[0]).unwrap()
        }
        check_trial(
            "conv3d",
            &[x, w, b],
            move |t| conv(t, stride, pad),
            move |t| conv(t, stride, pad),
        );
    }
}

pub fn deconv3d_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(1000 + trial as u64);
        let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let e = r.gen_range(1..=4);
        let x = (
            vec![1, cin, e, e, e],
            random_vec(&mut r, cin * e * e * e, -1.0, 1.0),
        );
        let w = (
            vec![cin, cout, k, k, k],
            random_vec(&mut r, cin * cout * k * k * k, -0.8, 0.8),
        );
        fn deconv<T: Scalar>(t: &[Tensor<T>], stride: usize) -> Tensor<T> {
            let layer = Deconv3d {
                weight: t[1].clone(),
                stride,
            };
            layer.forward(&t[0]).unwrap()
        }
        check_trial(
            "deconv3d",
            &[x, w],
            move |t| deconv(t, stride),
            move |t| deconv(t, stride),
        );
    }
}

pub fn batchnorm_gradients_train_and_eval() {
    for trial in 0..TRIALS {
        let mut r = rng(1100 + trial as u64);
        let c = r.gen_range(1..=3);
        let e = r.gen_range(2..=4);
        let x = (
            vec![1, c, e, e, e],
            random_vec(&mut r, c * e * e * e, -1.5, 1.5),
        );
        let gamma = (vec![c], random_vec(&mut r, c, 0.5, 1.5));
        let beta = (vec![c], random_vec(&mut r, c, -0.5, 0.5));
        for mode in [Mode::Train, Mode::Eval] {
            fn bn<T: Scalar>(t: &[Tensor<T>], mode: Mode) -> Tensor<T> {
                let c = t[1].numel();
                let layer = BatchNorm3d {
                    gamma: t[1].clone(),
                    beta: t[2].clone(),
                    running_mean: std::cell::RefCell::new(vec![T::from_f64(0.1); c]),
                    running_var: std::cell::RefCell::new(vec![T::from_f64(0.9); c]),
                    eps: 1e-5,
                    momentum: 0.1,
                };
                layer.forward(&t[0], mode).unwrap()
            }
            check_trial(
                "batchnorm3d",
                &[x.clone(), gamma.clone(), beta.clone()],
                move |t| bn(t, mode),
                move |t| bn(t, mode),
            );
        }
    }
}

pub fn layernorm_gradients() {
    for trial in 0..TRIALS {
        let mut r = rng(1200 + trial as u64);
        let (n, d) = (r.gen_range(1..=5), r.gen_range(2..=5));
        // Stagger each row so its variance stays far above eps: rows of
        // near-equal values put the normalization at an eps-scale curvature
        // spike where finite differences stop being a usable oracle.
        let mut xd = random_vec(&mut r, n * d, -1.5, 1.5);
        for (i, v) in xd.iter_mut().enumerate() {
            // draws span 3.0, so a 3.5 stagger guarantees row spread >= 0.5
            *v += 3.5 * (i % d) as f64;
        }
        let x = (vec![n, d], xd);
        let gamma = (vec![d], random_vec(&mut r, d, 0.5, 1.5));
        let beta = (vec![d], random_vec(&mut r, d, -0.5, 0.5));
        fn ln<T: Scalar>(t: &[Tensor<T>]) -> Tensor<T> {
            let layer = LayerNorm {
                gamma: t[1].clone(),
                beta: t[2].clone(),
                eps: 1e-5,
            };
            layer.forward(&t[0]).unwrap()
        }
        check_trial("layer_norm", &[x, gamma, beta], |t| ln(t), |t| ln(t));
    }
}

pub fn dropout_gradient_with_fixed_mask() {
    for trial in 0..TRIALS {
        let mut r = rng(1300 + trial as u64);
        let n = r.gen_range(1..=64);
        let x = (vec![n], random_vec(&mut r, n, -1.0, 1.0));
        let seed = trial as u64;
        fn drop_fixed<T: Scalar>(t: &[Tensor<T>], seed: u64) -> Tensor<T> {
            use rand::SeedableRng;
            let layer = Dropout::new(0.4).unwrap();
            let mut mask_rng = ChaCha12Rng::seed_from_u64(seed);
            layer.forward(&t[0], Mode::Train, &mut mask_rng)
        }
        check_trial(
            "dropout",
            &[x],
            move |t| drop_fixed(t, seed),
            move |t| drop_fixed(t, seed),
        );
    }
}

fn linear_from<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>) -> Linear<T> {
    Linear {
        weight: w.clone(),
        bias: b.clone(),
    }
}

pub fn mha_gradients() {
    let (n, d, heads) = (4usize, 8usize, 2usize);
    for trial in 0..TRIALS {
        let mut r = rng(1400 + trial as u64);
        let mut slots = vec![(vec![n, d], random_vec(&mut r, n * d, -1.0, 1.0))];
        for _ in 0..4 {
            slots.push((vec![d, d], random_vec(&mut r, d * d, -0.5, 0.5)));
            slots.push((vec![d], random_vec(&mut r, d, -0.2, 0.2)));
        }
        fn mha<T: Scalar>(t: &[Tensor<T>], heads: usize) -> Tensor<T> {
            let layer = Mha {
                wq: linear_from(&t[1], &t[2]),
                wk: linear_from(&t[3], &t[4]),
                wv: linear_from(&t[5], &t[6]),
                wo: linear_from(&t[7], &t[8]),
                heads,
            };
            layer.forward(&t[0]).unwrap()
        }
        check_trial(
            "mha",
            &slots,
            move |t| mha(t, heads),
            move |t| mha(t, heads),
        );
    }
}

pub fn ffn_gradients() {
    let (n, d, h) = (3usize, 4usize, 6usize);
    for trial in 0..TRIALS {
        let mut r = rng(1500 + trial as u64);
        let slots = vec![
            (vec![n, d], random_vec(&mut r, n * d, -1.0, 1.0)),
            (vec![d, h], random_vec(&mut r, d * h, -0.6, 0.6)),
            (vec![h], random_vec(&mut r, h, 0.05, 0.3)),
            (vec![h, d], random_vec(&mut r, h * d, -0.6, 0.6)),
            (vec![d], random_vec(&mut r, d, -0.2, 0.2)),
        ];
        fn ffn<T: Scalar>(t: &[Tensor<T>]) -> Tensor<T> {
            let layer = Ffn {
                lin1: linear_from(&t[1], &t[2]),
                lin2: linear_from(&t[3], &t[4]),
            };
            layer.forward(&t[0]).unwrap()
        }
        check_trial("ffn", &slots, |t| ffn(t), |t| ffn(t));
    }
}

pub fn two_stacked_transformer_layers_gradients() {
    let (n, d, heads, h) = (3usize, 4usize, 2usize, 6usize);
    // Parameters per layer: 4 x (w, b) for attention, 2 x (gamma, beta) for
    // the norms, 2 x (w, b) for the ffn.
    for trial in 0..30 {
        let mut r = rng(1600 + trial as u64);
        let mut slots = vec![(vec![n, d], random_vec(&mut r, n * d, -1.0, 1.0))];
        for _ in 0..2 {
            for _ in 0..4 {
                slots.push((vec![d, d], random_vec(&mut r, d * d, -0.5, 0.5)));
                slots.push((vec![d], random_vec(&mut r, d, -0.2, 0.2)));
            }
            slots.push((vec![d], random_vec(&mut r, d, 0.6, 1.4))); // ln1 gamma
            slots.push((vec![d], random_vec(&mut r, d, -0.3, 0.3))); // ln1 beta
            slots.push((vec![d], random_vec(&mut r, d, 0.6, 1.4))); // ln2 gamma
            slots.push((vec![d], random_vec(&mut r, d, -0.3, 0.3))); // ln2 beta
            slots.push((vec![d, h], random_vec(&mut r, d * h, -0.5, 0.5)));
            slots.push((vec![h], random_vec(&mut r, h, 0.05, 0.3)));
            slots.push((vec![h, d], random_vec(&mut r, h * d, -0.5, 0.5)));
            slots.push((vec![d], random_vec(&mut r, d, -0.2, 0.2)));
        }
        fn layer_at<T: Scalar>(t: &[Tensor<T>], base: usize, heads: usize) -> TransformerLayer<T> {
            TransformerLayer {
                mha: Mha {
                    wq: linear_from(&t[base], &t[base + 1]),
                    wk: linear_from(&t[base + 2], &t[base + 3]),
                    wv: linear_from(&t[base + 4], &t[base + 5]),
                    wo: linear_from(&t[base + 6], &t[base + 7]),
                    heads,
                },
                ln1: LayerNorm {
                    gamma: t[base + 8].clone(),
                    beta: t[base + 9].clone(),
                    eps: 1e-5,
                },
                ln2: LayerNorm {
                    gamma: t[base + 10].clone(),
                    beta: t[base + 11].clone(),
                    eps: 1e-5,
                },
                ffn: Ffn {
                    lin1: linear_from(&t[base + 12], &t[base + 13]),
                    lin2: linear_from(&t[base + 14], &t[base + 15]),
                },
            }
        }
        fn stack2<T: Scalar>(t: &[Tensor<T>], heads: usize) -> Tensor<T> {
            let l1 = layer_at(t, 1, heads);
            let l2 = layer_at(t, 17, heads);
            l2.forward(&l1.forward(&t[0]).unwrap()).unwrap()
        }
        check_trial(
            "transformer_x2",
            &slots,
            move |t| stack2(t, heads),
            move |t| stack2(t, heads),
        );
    }
}

pub fn dice_loss_gradient_on_toy_volume() {
    for trial in 0..TRIALS {
        let mut r = rng(1700 + trial as u64);
        let vox = 8;
        let target: Vec<u8> = (0..vox).map(|_| [0u8, 1, 2, 4][r.gen_range(0..4)]).collect();
        let logits = (
            vec![1, 4, 2, 2, 2],
            random_vec(&mut r, 4 * vox, -1.5, 1.5),
        );
        let t64 = target.clone();
        let t32 = target;
        check_trial(
            "softmax_dice_loss",
            &[logits],
            move |t| softmax_dice_loss(&t[0], &t64).unwrap(),
            move |t| softmax_dice_loss(&t[0], &t32).unwrap(),
        );
    }
}

// ── end-to-end tiny model ───────────────────────────────────────────────

fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::preset("tiny").unwrap();
    cfg.in_channels = 2;
    cfg.num_classes = 3;
    cfg.base_channels = 2;
    cfg.encoder_channels = 16;
    cfg.embed_dim = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.ffn_hidden = 8;
    cfg.input_extent = (8, 8, 8);
    cfg.validate().unwrap();
    cfg
}

/// Loss closure for the end-to-end check: BN in train mode (pure in the
/// input) and the dropout mask pinned by a fixed seed per evaluation.
fn micro_loss<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> f64 {
    use rand::SeedableRng;
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(99);
    let y = model.forward(x, Mode::Train, &mut dropout_rng).unwrap();
    weighted_sum(&y).item().to_f64()
}

fn analytic_grads<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
) -> (std::collections::BTreeMap<String, Vec<f64>>, Vec<f64>) {
    use rand::SeedableRng;
    model.zero_grads();
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(99);
    let y = model.forward(x, Mode::Train, &mut dropout_rng).unwrap();
    weighted_sum(&y).backward().unwrap();
    let mut grads = std::collections::BTreeMap::new();
    model.visit("model", &mut |name, t| {
        grads.insert(name, t.grad().unwrap().iter().map(|g| g.to_f64()).collect());
    });
    let xg = x.grad().unwrap().iter().map(|g| g.to_f64()).collect();
    (grads, xg)
}

/// Spot-check the full micro network: seeded sample of entries in every
/// parameter tensor plus the input, f64 analytic and f32 analytic both
/// against central differences through the f64 model.
pub fn end_to_end_micro_model_gradients() {
    let cfg = micro_config();
    let mut model64 = Model::<f64>::build(&cfg, 21).unwrap();
    let mut model32 = Model::<f32>::build(&cfg, 21).unwrap();
    // Check at a generic point: the init point is structured (zero biases,
    // zero batch-norm shifts), which parks ReLU inputs exactly on the kink
    // at the deepest 1x1x1 stages where the subgradient convention and
    // central differences legitimately disagree. The same per-name jitter
    // is applied to both dtypes.
    let jitter_for = |name: &str, n: usize| -> Vec<f64> {
        let mut h = 0x5851_f42d_4c95_7f2du64;
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
        let mut jr = rng(h);
        random_vec(&mut jr, n, -0.25, 0.25)
    };
    model64.visit_mut("model", &mut |name, t| {
        let j = jitter_for(&name, t.numel());
        t.update_data(|d| {
            for (v, &dj) in d.iter_mut().zip(&j) {
                *v += dj;
            }
        });
    });
    model32.visit_mut("model", &mut |name, t| {
        let j = jitter_for(&name, t.numel());
        t.update_data(|d| {
            for (v, &dj) in d.iter_mut().zip(&j) {
                *v += dj as f32;
            }
        });
    });
    let n = 2 * 8 * 8 * 8;
    let mut r = rng(2000);
    let xdata = random_vec(&mut r, n, -1.0, 1.0);
    let x64 = Tensor::<f64>::param(xdata.clone(), &[1, 2, 8, 8, 8]);
    let x32 = Tensor::<f32>::param(to_t::<f32>(&xdata), &[1, 2, 8, 8, 8]);

    let (g64, xg64) = analytic_grads(&model64, &x64);
    let (g32, xg32) = analytic_grads(&model32, &x32);

    let mut tensors: Vec<(String, usize)> = Vec::new();
    model64.visit("model", &mut |name, t| tensors.push((name, t.numel())));

    // Relative errors are floored at a fraction of the model's overall
    // gradient scale; entries that normalization layers mathematically kill
    // carry only roundoff in both the analytic and oracle values.
    let gscale = g64
        .values()
        .flatten()
        .chain(xg64.iter())
        .fold(1e-12f64, |m, &v| m.max(v.abs()));
    let floor = (1e-3 * gscale).max(1e-6);

    let mut checked = 0usize;
    let check_entry = |name: &str, idx: usize, oracle: f64, a64: f64, a32: f64| {
        let d64 = a64.abs().max(oracle.abs()).max(floor);
        let e64 = (a64 - oracle).abs() / d64;
        assert!(
            e64 < TOL_F64.max(5e-6),
            "{name}[{idx}] f64: analytic {a64:.6e} vs oracle {oracle:.6e} (rel {e64:.3e})"
        );
        let d32 = a32.abs().max(oracle.abs()).max(floor);
        let e32 = (a32 - oracle).abs() / d32;
        assert!(
            e32 < TOL_F32,
            "{name}[{idx}] f32: analytic {a32:.6e} vs oracle {oracle:.6e} (rel {e32:.3e})"
        );
    };

    for (name, numel) in &tensors {
        let samples = 2.min(*numel);
        for s in 0..samples {
            let idx = if *numel <= 2 {
                s
            } else {
                (r.gen::<u64>() as usize) % numel
            };
            // central difference on this entry through the f64 model
            let mut orig = 0f64;
            let mut set = |m: &mut Model<f64>, value: Option<f64>, orig: &mut f64| {
                m.visit_mut("model", &mut |n2, t| {
                    if n2 == *name {
                        t.update_data(|d| match value {
                            Some(delta) => {
                                *orig = d[idx];
                                d[idx] = *orig + delta;
                            }
                            None => d[idx] = *orig,
                        });
                    }
                });
            };
            set(&mut model64, Some(H), &mut orig);
            let fp = volseg_core::no_grad(|| micro_loss(&model64, &x64.detach()));
            set(&mut model64, None, &mut orig);
            set(&mut model64, Some(-H), &mut orig);
            let fm = volseg_core::no_grad(|| micro_loss(&model64, &x64.detach()));
            set(&mut model64, None, &mut orig);
            let oracle = (fp - fm) / (2.0 * H);
            check_entry(name, idx, oracle, g64[name][idx], g32[name][idx]);
            checked += 1;
        }
    }

    for s in 0..6 {
        let idx = (s * 97) % n;
        let mut plus = xdata.clone();
        plus[idx] += H;
        let mut minus = xdata.clone();
        minus[idx] -= H;
        let fp = volseg_core::no_grad(|| {
            micro_loss(&model64, &Tensor::from_vec(plus, &[1, 2, 8, 8, 8]))
        });
        let fm = volseg_core::no_grad(|| {
            micro_loss(&model64, &Tensor::from_vec(minus, &[1, 2, 8, 8, 8]))
        });
        let oracle = (fp - fm) / (2.0 * H);
        check_entry("input", idx, oracle, xg64[idx], xg32[idx]);
        checked += 1;
    }
    assert!(checked > 100, "spot check covered only {checked} entries");
}
