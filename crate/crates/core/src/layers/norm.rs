//! Batch normalization over 3D feature maps and per-token layer norm.
//!
//! Both are fused primitives: the forward pass saves the normalized values
//! and inverse standard deviations, and backward applies the closed-form
//! VJP. Statistics accumulate in f64, sequentially per channel/row, so runs
//! are bit-reproducible.

use std::cell::RefCell;
use std::sync::Arc;

use rayon::prelude::*;

use crate::tensor::autograd::Backward;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

use super::Mode;

/// Per-channel batch normalization for `[B, C, D, H, W]` tensors.
///
/// Train mode normalizes by batch statistics (biased variance) and folds the
/// batch stats into running estimates with `momentum` (unbiased variance,
/// matching common deep-learning practice). Eval mode is a per-channel
/// affine map using the running estimates; before any train step those are
/// the init values (mean 0, var 1).
pub struct BatchNorm3d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: RefCell<Vec<T>>,
    pub running_var: RefCell<Vec<T>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Tensor::param(vec![T::ONE; channels], &[channels]),
            beta: Tensor::param(vec![T::ZERO; channels], &[channels]),
            running_mean: RefCell::new(vec![T::ZERO; channels]),
            running_var: RefCell::new(vec![T::ONE; channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.channels() {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm3d",
                lhs: s.to_vec(),
                rhs: vec![self.channels()],
            });
        }
        let (b, c) = (s[0], s[1]);
        let vox = s[2] * s[3] * s[4];
        let n = b * vox;
        let xd = x.data();

        // Per-channel (mean, invstd); batch stats in train mode, running in eval.
        let (mean, invstd): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let stats: Vec<(f64, f64)> = (0..c)
                    .into_par_iter()
                    .map(|ci| {
                        let mut sum = 0.0f64;
                        for bi in 0..b {
                            let vol = &xd[(bi * c + ci) * vox..][..vox];
                            for &v in vol {
                                sum += v.to_f64();
                            }
                        }
                        let mu = sum / n as f64;
                        let mut ss = 0.0f64;
                        for bi in 0..b {
                            let vol = &xd[(bi * c + ci) * vox..][..vox];
                            for &v in vol {
                                let d = v.to_f64() - mu;
                                ss += d * d;
                            }
                        }
                        (mu, ss / n as f64)
                    })
                    .collect();
                {
                    // Fold into running estimates.
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    let m = self.momentum;
                    for (ci, &(mu, var)) in stats.iter().enumerate() {
                        let unbiased = if n > 1 {
                            var * n as f64 / (n - 1) as f64
                        } else {
                            var
                        };
                        rm[ci] = T::from_f64(rm[ci].to_f64() * (1.0 - m) + mu * m);
                        rv[ci] = T::from_f64(rv[ci].to_f64() * (1.0 - m) + unbiased * m);
                    }
                }
                stats
                    .iter()
                    .map(|&(mu, var)| (mu, 1.0 / (var + self.eps).sqrt()))
                    .unzip()
            }
            Mode::Eval => {
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                (0..c)
                    .map(|ci| (rm[ci].to_f64(), 1.0 / (rv[ci].to_f64() + self.eps).sqrt()))
                    .unzip()
            }
        };

        let gd = self.gamma.data();
        let bd = self.beta.data();
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut out = vec![T::ZERO; xd.len()];
        out.par_chunks_mut(vox)
            .zip(xhat.par_chunks_mut(vox))
            .enumerate()
            .for_each(|(bc, (ovol, hvol))| {
                let ci = bc % c;
                let (mu, r) = (T::from_f64(mean[ci]), T::from_f64(invstd[ci]));
                let (gm, bt) = (gd[ci], bd[ci]);
                let xvol = &xd[bc * vox..][..vox];
                for ((o, h), &v) in ovol.iter_mut().zip(hvol.iter_mut()).zip(xvol) {
                    let xh = (v - mu) * r;
                    *h = xh;
                    *o = gm.mul_add(xh, bt);
                }
            });

        Ok(Tensor::from_op(
            out,
            s,
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(BatchNormBackward {
                xhat: Arc::new(xhat),
                invstd: invstd.iter().map(|&r| T::from_f64(r)).collect(),
                b,
                c,
                vox,
                train: mode == Mode::Train,
            }),
        ))
    }
}

struct BatchNormBackward<T> {
    xhat: Arc<Vec<T>>,
    invstd: Vec<T>,
    b: usize,
    c: usize,
    vox: usize,
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNormBackward<T> {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (b, c, vox) = (self.b, self.c, self.vox);
        let n = (b * vox) as f64;
        let gamma = inputs[1].data();
        let xhat = &self.xhat;

        // Per-channel sums of g and g*xhat (needed by all three grads).
        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut sg = 0.0f64;
                let mut sgx = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ci) * vox;
                    for i in 0..vox {
                        let g = grad[base + i].to_f64();
                        sg += g;
                        sgx += g * xhat[base + i].to_f64();
                    }
                }
                (sg, sgx)
            })
            .collect();

        let gx = needs[0].then(|| {
            let mut gx = vec![T::ZERO; grad.len()];
            gx.par_chunks_mut(vox).enumerate().for_each(|(bc, gvol)| {
                let ci = bc % c;
                let gm = gamma[ci];
                let r = self.invstd[ci];
                let base = bc * vox;
                if self.train {
                    let mg = T::from_f64(sums[ci].0 / n);
                    let mgx = T::from_f64(sums[ci].1 / n);
                    for (i, gv) in gvol.iter_mut().enumerate() {
                        let g = grad[base + i];
                        let xh = xhat[base + i];
                        *gv = gm * r * (g - mg - xh * mgx);
                    }
                } else {
                    // Running statistics are constants in eval mode.
                    for (i, gv) in gvol.iter_mut().enumerate() {
                        *gv = grad[base + i] * gm * r;
                    }
                }
            });
            gx
        });
        let ggamma = needs[1].then(|| sums.iter().map(|&(_, sgx)| T::from_f64(sgx)).collect());
        let gbeta = needs[2].then(|| sums.iter().map(|&(sg, _)| T::from_f64(sg)).collect());
        vec![gx, ggamma, gbeta]
    }
}

/// Layer normalization over the last dimension (per token).
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(vec![T::ONE; dim], &[dim]),
            beta: Tensor::param(vec![T::ZERO; dim], &[dim]),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.dim();
        if x.shape().last() != Some(&d) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let rows = x.numel() / d;
        let xd = x.data();
        let gd = self.gamma.data();
        let bd = self.beta.data();
        let mut out = vec![T::ZERO; xd.len()];
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut invstd = vec![T::ZERO; rows];

        out.chunks_mut(d)
            .zip(xhat.chunks_mut(d))
            .zip(invstd.iter_mut())
            .enumerate()
            .for_each(|(r, ((orow, hrow), inv))| {
                let xrow = &xd[r * d..(r + 1) * d];
                let mut sum = 0.0f64;
                for &v in xrow {
                    sum += v.to_f64();
                }
                let mu = sum / d as f64;
                let mut ss = 0.0f64;
                for &v in xrow {
                    let dv = v.to_f64() - mu;
                    ss += dv * dv;
                }
                let r_ = 1.0 / (ss / d as f64 + self.eps).sqrt();
                *inv = T::from_f64(r_);
                let (mu, r_) = (T::from_f64(mu), T::from_f64(r_));
                for (i, ((o, h), &v)) in orow.iter_mut().zip(hrow.iter_mut()).zip(xrow).enumerate()
                {
                    let xh = (v - mu) * r_;
                    *h = xh;
                    *o = gd[i].mul_add(xh, bd[i]);
                }
            });

        Ok(Tensor::from_op(
            out,
            x.shape(),
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(LayerNormBackward {
                xhat: Arc::new(xhat),
                invstd,
                rows,
                d,
            }),
        ))
    }
}

struct LayerNormBackward<T> {
    xhat: Arc<Vec<T>>,
    invstd: Vec<T>,
    rows: usize,
    d: usize,
}

impl<T: Scalar> Backward<T> for LayerNormBackward<T> {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (rows, d) = (self.rows, self.d);
        let gamma = inputs[1].data();
        let xhat = &self.xhat;

        let gx = needs[0].then(|| {
            let mut gx = vec![T::ZERO; grad.len()];
            for r in 0..rows {
                let base = r * d;
                let mut sg = 0.0f64;
                let mut sgx = 0.0f64;
                for i in 0..d {
                    let gh = (grad[base + i] * gamma[i]).to_f64();
                    sg += gh;
                    sgx += gh * xhat[base + i].to_f64();
                }
                let mg = T::from_f64(sg / d as f64);
                let mgx = T::from_f64(sgx / d as f64);
                let inv = self.invstd[r];
                for i in 0..d {
                    let gh = grad[base + i] * gamma[i];
                    gx[base + i] = inv * (gh - mg - xhat[base + i] * mgx);
                }
            }
            gx
        });
        let ggamma = needs[1].then(|| {
            let mut gg = vec![T::ZERO; d];
            for r in 0..rows {
                let base = r * d;
                for (i, g) in gg.iter_mut().enumerate() {
                    *g += grad[base + i] * xhat[base + i];
                }
            }
            gg
        });
        let gbeta = needs[2].then(|| {
            let mut gb = vec![T::ZERO; d];
            for r in 0..rows {
                let base = r * d;
                for (i, g) in gb.iter_mut().enumerate() {
                    *g += grad[base + i];
                }
            }
            gb
        });
        vec![gx, ggamma, gbeta]
    }
}
