//! Soft Dice training loss and the binary Dice overlap score.

use std::sync::Arc;

use crate::tensor::autograd::Backward;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

use super::remap_labels;

pub const DICE_EPS: f64 = 1e-5;

/// Softmax Dice loss over the channel axis of `[B, C, ...]` logits.
///
/// Probabilities come from a stabilized softmax per voxel; each foreground
/// class contributes a soft Dice `(2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`
/// aggregated over batch and volume, and the loss is one minus their mean.
/// The background class is excluded so it cannot swamp the foreground.
/// `target` uses the raw label alphabet {0, 1, 2, 4}.
pub fn softmax_dice_loss<T: Scalar>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() < 3 {
        return Err(TensorError::Contract(format!(
            "dice loss expects [B, C, ...spatial] logits, got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let vox: usize = shape[2..].iter().product();
    if target.len() != b * vox {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss target",
            lhs: shape.to_vec(),
            rhs: vec![target.len()],
        });
    }
    let classes = remap_labels(target, c)?;

    // Per-voxel softmax over the channel axis.
    let ld = logits.data();
    let mut probs = vec![T::ZERO; ld.len()];
    for bi in 0..b {
        let base = bi * c * vox;
        for v in 0..vox {
            let mut mx = ld[base + v];
            for ci in 1..c {
                let x = ld[base + ci * vox + v];
                if x > mx {
                    mx = x;
                }
            }
            let mut denom = T::ZERO;
            for ci in 0..c {
                let e = (ld[base + ci * vox + v] - mx).exp();
                probs[base + ci * vox + v] = e;
                denom += e;
            }
            for ci in 0..c {
                let idx = base + ci * vox + v;
                probs[idx] = probs[idx] / denom;
            }
        }
    }

    // Per-class intersection and mass sums, foreground classes only.
    let fg = c - 1;
    let mut inter = vec![0.0f64; c];
    let mut p_sum = vec![0.0f64; c];
    let mut g_sum = vec![0.0f64; c];
    for bi in 0..b {
        let base = bi * c * vox;
        for v in 0..vox {
            let g = classes[bi * vox + v] as usize;
            g_sum[g] += 1.0;
            for ci in 1..c {
                let p = probs[base + ci * vox + v].to_f64();
                p_sum[ci] += p;
                if ci == g {
                    inter[ci] += p;
                }
            }
        }
    }
    let mut dice = vec![0.0f64; c];
    let mut mean_dice = 0.0f64;
    for ci in 1..c {
        dice[ci] = (2.0 * inter[ci] + DICE_EPS) / (p_sum[ci] + g_sum[ci] + DICE_EPS);
        mean_dice += dice[ci];
    }
    mean_dice /= fg as f64;
    let loss = T::from_f64(1.0 - mean_dice);

    Ok(Tensor::from_op(
        vec![loss],
        &[1],
        vec![logits.clone()],
        Box::new(DiceLossBackward {
            probs: Arc::new(probs),
            classes: Arc::new(classes),
            dice,
            p_sum,
            g_sum,
            b,
            c,
            vox,
        }),
    ))
}

struct DiceLossBackward<T> {
    probs: Arc<Vec<T>>,
    classes: Arc<Vec<u8>>,
    dice: Vec<f64>,
    p_sum: Vec<f64>,
    g_sum: Vec<f64>,
    b: usize,
    c: usize,
    vox: usize,
}

impl<T: Scalar> Backward<T> for DiceLossBackward<T> {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let (b, c, vox) = (self.b, self.c, self.vox);
            let fg = (c - 1) as f64;
            let upstream = grad[0].to_f64();
            // dLoss/dDice_c = -1/fg; dDice_c/dp_c[v] = (2g - dice_c)/(B_c + eps)
            let mut ddice_dp_scale = vec![0.0f64; c];
            for ci in 1..c {
                ddice_dp_scale[ci] = 1.0 / (self.p_sum[ci] + self.g_sum[ci] + DICE_EPS);
            }
            let mut gx = vec![T::ZERO; b * c * vox];
            let mut dldp = vec![0.0f64; c];
            for bi in 0..b {
                let base = bi * c * vox;
                for v in 0..vox {
                    let g = self.classes[bi * vox + v] as usize;
                    // dL/dp per class at this voxel
                    dldp[0] = 0.0;
                    for ci in 1..c {
                        let two_g = if ci == g { 2.0 } else { 0.0 };
                        let ddice = (two_g - self.dice[ci]) * ddice_dp_scale[ci];
                        dldp[ci] = -(1.0 / fg) * ddice * upstream;
                    }
                    // softmax VJP per voxel
                    let mut dot = 0.0f64;
                    for ci in 0..c {
                        dot += dldp[ci] * self.probs[base + ci * vox + v].to_f64();
                    }
                    for ci in 0..c {
                        let p = self.probs[base + ci * vox + v].to_f64();
                        gx[base + ci * vox + v] = T::from_f64(p * (dldp[ci] - dot));
                    }
                }
            }
            gx
        })]
    }
}

/// Binary overlap score `2|P∩G| / (|P|+|G|)`. Both masks empty scores 1,
/// exactly one empty scores 0.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_score",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut p = 0u64;
    let mut g = 0u64;
    let mut i = 0u64;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as u64;
        g += b as u64;
        i += (a && b) as u64;
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * i as f64 / (p + g) as f64,
    })
}
