//! 3D convolution and transposed-convolution layers.

use rand_chacha::ChaCha12Rng;

use super::init::kaiming_normal;
use super::kernels::{
    conv3d_bwd_bias, conv3d_bwd_input, conv3d_bwd_weight, conv3d_fwd, deconv3d_bwd_input,
    deconv3d_bwd_weight, deconv3d_fwd, ConvGeom, DeconvGeom,
};
use crate::tensor::autograd::Backward;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Strided cross-correlation with optional bias.
///
/// Output extent per spatial axis is `(in + 2*pad - k) / stride + 1`.
pub struct Conv3d<T: Scalar> {
    pub weight: Tensor<T>, // [cout, cin, k, k, k]
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let weight = Tensor::param(
            kaiming_normal(rng, cout * fan_in, fan_in),
            &[cout, cin, k, k, k],
        );
        let bias = Some(Tensor::param(vec![T::ZERO; cout], &[cout]));
        Conv3d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn geom(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(TensorError::Contract(format!(
                "conv3d expects [B, C, D, H, W] input, got {s:?}"
            )));
        }
        let (b, cin, ind, inh, inw) = (s[0], s[1], s[2], s[3], s[4]);
        if cin != self.in_channels() {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d channels",
                lhs: s.to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let k = self.kernel();
        let ext = |e| ConvGeom::conv_out_extent(e, k, self.stride, self.padding);
        let (outd, outh, outw) = match (ext(ind), ext(inh), ext(inw)) {
            (Some(d), Some(h), Some(w)) if d > 0 && h > 0 && w > 0 => (d, h, w),
            _ => {
                return Err(TensorError::Contract(format!(
                    "conv3d produces non-positive output extent for input {s:?} with k={k}, stride={}, pad={}",
                    self.stride, self.padding
                )))
            }
        };
        Ok(ConvGeom {
            b,
            cin,
            cout: self.out_channels(),
            k,
            stride: self.stride,
            pad: self.padding,
            ind,
            inh,
            inw,
            outd,
            outh,
            outw,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let mut out = vec![T::ZERO; g.b * g.cout * g.out_vox()];
        conv3d_fwd(
            x.data(),
            self.weight.data(),
            self.bias.as_ref().map(|b| b.data()),
            g,
            &mut out,
        );
        let out_shape = [g.b, g.cout, g.outd, g.outh, g.outw];
        let mut inputs = vec![x.clone(), self.weight.clone()];
        if let Some(b) = &self.bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            &out_shape,
            inputs,
            Box::new(Conv3dBackward { geom: g }),
        ))
    }
}

struct Conv3dBackward {
    geom: ConvGeom,
}

impl<T: Scalar> Backward<T> for Conv3dBackward {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let gx = needs[0].then(|| {
            let mut buf = vec![T::ZERO; g.b * g.cin * g.in_vox()];
            conv3d_bwd_input(grad, inputs[1].data(), g, &mut buf);
            buf
        });
        let gw = needs[1].then(|| {
            let mut buf = vec![T::ZERO; g.cout * g.cin * g.k * g.k * g.k];
            conv3d_bwd_weight(inputs[0].data(), grad, g, &mut buf);
            buf
        });
        let mut grads = vec![gx, gw];
        if needs.len() > 2 {
            grads.push(needs[2].then(|| conv3d_bwd_bias(grad, g.b, g.cout, g.out_vox())));
        }
        grads
    }
}

/// Transposed convolution; the exact adjoint of the matching pad-0 strided
/// convolution. Output extent per axis is `(in - 1) * stride + k`.
pub struct Deconv3d<T: Scalar> {
    pub weight: Tensor<T>, // [cin, cout, k, k, k]
    pub stride: usize,
}

impl<T: Scalar> Deconv3d<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let fan_in = cin * k * k * k;
        let weight = Tensor::param(
            kaiming_normal(rng, cin * cout * k * k * k, fan_in),
            &[cin, cout, k, k, k],
        );
        Deconv3d { weight, stride }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(TensorError::Contract(format!(
                "deconv3d expects [B, C, D, H, W] input, got {s:?}"
            )));
        }
        if s[1] != self.in_channels() {
            return Err(TensorError::ShapeMismatch {
                op: "deconv3d channels",
                lhs: s.to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let g = DeconvGeom {
            b: s[0],
            cin: s[1],
            cout: self.out_channels(),
            k: self.kernel(),
            stride: self.stride,
            ind: s[2],
            inh: s[3],
            inw: s[4],
        };
        let mut out = vec![T::ZERO; g.b * g.cout * g.out_vox()];
        deconv3d_fwd(x.data(), self.weight.data(), g, &mut out);
        let out_shape = [g.b, g.cout, g.outd(), g.outh(), g.outw()];
        Ok(Tensor::from_op(
            out,
            &out_shape,
            vec![x.clone(), self.weight.clone()],
            Box::new(Deconv3dBackward { geom: g }),
        ))
    }
}

struct Deconv3dBackward {
    geom: DeconvGeom,
}

impl<T: Scalar> Backward<T> for Deconv3dBackward {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let gx = needs[0].then(|| {
            let mut buf = vec![T::ZERO; g.b * g.cin * g.in_vox()];
            deconv3d_bwd_input(grad, inputs[1].data(), g, &mut buf);
            buf
        });
        let gw = needs[1].then(|| {
            let mut buf = vec![T::ZERO; g.cin * g.cout * g.k * g.k * g.k];
            deconv3d_bwd_weight(inputs[0].data(), grad, g, &mut buf);
            buf
        });
        vec![gx, gw]
    }
}
