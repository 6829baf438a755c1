//! Token-sequence layers: linear projection, multi-head self-attention,
//! feed-forward network, and the pre-norm residual transformer layer.
//!
//! All of these operate on `[N, d]` token matrices and compose autograd
//! primitives, so no hand-written backward passes live here.

use rand_chacha::ChaCha12Rng;

use super::init::xavier_uniform;
use super::norm::LayerNorm;
use crate::tensor::ops;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Affine map along the last dimension: `y = x W + b`.
///
/// Weight layout is `[in, out]` so tokens multiply without a transpose.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Self {
        Linear {
            weight: Tensor::param(
                xavier_uniform(rng, fan_in * fan_out, fan_in, fan_out),
                &[fan_in, fan_out],
            ),
            bias: Tensor::param(vec![T::ZERO; fan_out], &[fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (fan_in, fan_out) = (self.weight.shape()[0], self.weight.shape()[1]);
        let rank = x.shape().len();
        if rank < 1 || x.shape()[rank - 1] != fan_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let rows = x.numel() / fan_in;
        let flat = ops::reshape(x, &[rows, fan_in])?;
        let y = ops::matmul(&flat, &self.weight)?;
        let y = ops::add_bias(&y, &self.bias)?;
        let mut out_shape = x.shape().to_vec();
        out_shape[rank - 1] = fan_out;
        ops::reshape(&y, &out_shape)
    }
}

/// Multi-head scaled dot-product self-attention over `[N, d]` tokens.
pub struct Mha<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Mha<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Contract(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Mha {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.weight.shape()[0]
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (probs, out) = self.forward_with_attention(z)?;
        drop(probs);
        Ok(out)
    }

    /// Forward pass that also returns the per-head attention weights
    /// `[heads, N, N]` (rows sum to 1).
    pub fn forward_with_attention(&self, z: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let d = self.dim();
        if z.shape().len() != 2 || z.shape()[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "mha",
                lhs: z.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let n = z.shape()[0];
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        // [N, d] -> [heads, N, dh]
        let split = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let r = ops::reshape(t, &[n, self.heads, dh])?;
            ops::permute(&r, &[1, 0, 2])
        };
        let q = split(&self.wq.forward(z)?)?;
        let k = split(&self.wk.forward(z)?)?;
        let v = split(&self.wv.forward(z)?)?;

        // Heads run one at a time: at full scale one N x N score matrix is
        // already large, and sequencing keeps the transient footprint to a
        // single head.
        let mut head_probs = Vec::with_capacity(self.heads);
        let mut head_ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ops::reshape(&ops::slice(&q, 0, h, 1)?, &[n, dh])?;
            let kh = ops::reshape(&ops::slice(&k, 0, h, 1)?, &[n, dh])?;
            let vh = ops::reshape(&ops::slice(&v, 0, h, 1)?, &[n, dh])?;
            let kt = ops::permute(&kh, &[1, 0])?;
            let scores = ops::scale(&ops::matmul(&qh, &kt)?, scale);
            let probs = ops::softmax(&scores, 1)?;
            let ctx = ops::matmul(&probs, &vh)?;
            head_probs.push(probs);
            head_ctx.push(ctx);
        }
        let ctx_refs: Vec<&Tensor<T>> = head_ctx.iter().collect();
        let merged = ops::concat(&ctx_refs, 1)?; // [N, heads*dh] in head-major column order
        let out = self.wo.forward(&merged)?;
        Ok((head_probs, out))
    }
}

/// Two-layer position-wise feed-forward network with ReLU.
pub struct Ffn<T: Scalar> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
}

impl<T: Scalar> Ffn<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        Ffn {
            lin1: Linear::new(dim, hidden, rng),
            lin2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.lin2.forward(&ops::relu(&self.lin1.forward(z)?))
    }
}

/// Pre-norm residual transformer layer:
/// `z' = MHA(LN(z)) + z`, `out = FFN(LN(z')) + z'`.
pub struct TransformerLayer<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub mha: Mha<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

impl<T: Scalar> TransformerLayer<T> {
    pub fn new(dim: usize, heads: usize, ffn_hidden: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: LayerNorm::new(dim),
            mha: Mha::new(dim, heads, rng)?,
            ln2: LayerNorm::new(dim),
            ffn: Ffn::new(dim, ffn_hidden, rng),
        })
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let attended = ops::add(&self.mha.forward(&self.ln1.forward(z)?)?, z)?;
        let out = ops::add(&self.ffn.forward(&self.ln2.forward(&attended)?)?, &attended)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_token_attention_is_value_path() {
        // With one token the softmax over keys is [1.0], so
        // out = Wo(Wv z + bv) + bo exactly.
        let mha = Mha::<f64>::new(8, 2, &mut rng(3)).unwrap();
        let z = Tensor::from_vec((0..8).map(|i| 0.1 * i as f64).collect(), &[1, 8]);
        let out = mha.forward(&z).unwrap();
        let expected = mha.wo.forward(&mha.wv.forward(&z).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mha = Mha::<f32>::new(16, 4, &mut rng(5)).unwrap();
        let z = Tensor::from_vec((0..5 * 16).map(|i| (i as f32 * 0.37).sin()).collect(), &[5, 16]);
        let (probs, _) = mha.forward_with_attention(&z).unwrap();
        for p in &probs {
            for row in p.data().chunks(5) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        // No positional information inside MHA itself.
        let mha = Mha::<f64>::new(8, 2, &mut rng(7)).unwrap();
        let n = 5;
        let data: Vec<f64> = (0..n * 8).map(|i| ((i * 37 % 11) as f64) * 0.21 - 1.0).collect();
        let z = Tensor::from_vec(data.clone(), &[n, 8]);
        let out = mha.forward(&z).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let mut pdata = vec![0.0; n * 8];
        for (dst, &src) in perm.iter().enumerate() {
            pdata[dst * 8..(dst + 1) * 8].copy_from_slice(&data[src * 8..(src + 1) * 8]);
        }
        let pz = Tensor::from_vec(pdata, &[n, 8]);
        let pout = mha.forward(&pz).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..8 {
                let a = out.data()[src * 8 + i];
                let b = pout.data()[dst * 8 + i];
                assert!((a - b).abs() < 1e-10, "row {src} -> {dst} differs");
            }
        }
    }

    #[test]
    fn ffn_zero_input_zero_biases_gives_zero() {
        let ffn = Ffn::<f32>::new(8, 16, &mut rng(1));
        let z = Tensor::zeros(&[3, 8]);
        let out = ffn.forward(&z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_tokenwise_independence() {
        let ffn = Ffn::<f32>::new(4, 8, &mut rng(2));
        let mut data: Vec<f32> = (0..3 * 4).map(|i| i as f32 * 0.1).collect();
        let a = ffn.forward(&Tensor::from_vec(data.clone(), &[3, 4])).unwrap();
        data[0] = 99.0; // edit token 0 only
        let b = ffn.forward(&Tensor::from_vec(data, &[3, 4])).unwrap();
        assert_eq!(&a.data()[4..], &b.data()[4..]);
        assert_ne!(&a.data()[..4], &b.data()[..4]);
    }

    #[test]
    fn zero_weight_transformer_layer_is_identity() {
        let mut tl = TransformerLayer::<f64>::new(8, 2, 16, &mut rng(4)).unwrap();
        for lin in [&mut tl.mha.wq, &mut tl.mha.wk, &mut tl.mha.wv, &mut tl.mha.wo] {
            lin.weight.update_data(|d| d.fill(0.0));
            lin.bias.update_data(|d| d.fill(0.0));
        }
        for lin in [&mut tl.ffn.lin1, &mut tl.ffn.lin2] {
            lin.weight.update_data(|d| d.fill(0.0));
            lin.bias.update_data(|d| d.fill(0.0));
        }
        let z = Tensor::from_vec((0..4 * 8).map(|i| (i as f64 * 0.3).cos()).collect(), &[4, 8]);
        let out = tl.forward(&z).unwrap();
        for (a, b) in out.data().iter().zip(z.data()) {
            assert_eq!(a, b, "residual path must carry the input exactly");
        }
    }
}
