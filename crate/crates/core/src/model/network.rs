//! The segmentation network: convolutional encoder, transformer bottleneck
//! over flattened tokens, and progressive-upsampling decoder with skip
//! fusion by concatenation.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::config::ModelConfig;
use crate::layers::{
    BatchNorm3d, Conv3d, Deconv3d, Dropout, Mode, ParamVisit, TransformerLayer,
};
use crate::tensor::ops;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Residual unit: `x + Conv3(ReLU(BN(Conv3(ReLU(BN(x))))))` at constant
/// channel count.
pub struct ResBlock<T: Scalar> {
    pub bn1: BatchNorm3d<T>,
    pub conv1: Conv3d<T>,
    pub bn2: BatchNorm3d<T>,
    pub conv2: Conv3d<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(channels: usize, rng: &mut ChaCha12Rng) -> Self {
        ResBlock {
            bn1: BatchNorm3d::new(channels),
            conv1: Conv3d::new(channels, channels, 3, 1, 1, rng),
            bn2: BatchNorm3d::new(channels),
            conv2: Conv3d::new(channels, channels, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv1.forward(&ops::relu(&self.bn1.forward(x, mode)?))?;
        let h = self.conv2.forward(&ops::relu(&self.bn2.forward(&h, mode)?))?;
        ops::add(x, &h)
    }
}

impl<T: Scalar> ParamVisit<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.bn1.visit_mut(&format!("{prefix}.bn1"), f);
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.bn2.visit_mut(&format!("{prefix}.bn2"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &RefCell<Vec<T>>)) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
    }
}

/// One decoder upsampling stage: channel-halving conv, stride-2 transposed
/// conv, concatenation with the encoder skip, fusing conv, then residual
/// blocks at the halved width.
struct UpStage<T: Scalar> {
    reduce: Conv3d<T>,
    up: Deconv3d<T>,
    fuse: Conv3d<T>,
    blocks: Vec<ResBlock<T>>,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    init_conv: Conv3d<T>,
    init_dropout: Dropout,
    stages: Vec<Vec<ResBlock<T>>>,
    downs: Vec<Conv3d<T>>,
    proj: Conv3d<T>,
    pub pos_embed: Tensor<T>,
    tlayers: Vec<TransformerLayer<T>>,
    fmap: Conv3d<T>,
    head_blocks: Vec<ResBlock<T>>,
    ups: Vec<UpStage<T>>,
    end_conv: Conv3d<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic construction from a seed; the layer inventory follows
    /// the configured geometry exactly.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config
            .validate()
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let chans = config.stage_channels();
        let downs_n = config.downsamples();

        let init_conv = Conv3d::new(config.in_channels, chans[0], 3, 1, 1, &mut rng);
        let init_dropout =
            Dropout::new(config.dropout_p).map_err(|e| TensorError::Contract(e.to_string()))?;

        let mut stages = Vec::with_capacity(downs_n + 1);
        let mut downs = Vec::with_capacity(downs_n);
        for (i, &c) in chans.iter().enumerate() {
            let blocks_n = if i == 0 { 1 } else { 2 };
            stages.push((0..blocks_n).map(|_| ResBlock::new(c, &mut rng)).collect());
            if i < downs_n {
                downs.push(Conv3d::new(c, chans[i + 1], 3, 2, 1, &mut rng));
            }
        }

        let proj = Conv3d::new(config.token_in_channels(), config.embed_dim, 3, 1, 1, &mut rng);
        let pos_embed = Tensor::param(
            vec![T::ZERO; config.seq_len() * config.embed_dim],
            &[config.seq_len(), config.embed_dim],
        );
        let tlayers = (0..config.depth)
            .map(|_| TransformerLayer::new(config.embed_dim, config.heads, config.ffn_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let unfold3 = config.patch_unfold.pow(3);
        let fmap = Conv3d::new(
            config.embed_dim / unfold3,
            config.encoder_channels,
            3,
            1,
            1,
            &mut rng,
        );

        let head_blocks = (0..2)
            .map(|_| ResBlock::new(config.encoder_channels, &mut rng))
            .collect();
        let mut ups = Vec::with_capacity(downs_n);
        for i in (0..downs_n).rev() {
            // from chans[i+1] down to chans[i]
            let cin = chans[i + 1];
            let cout = chans[i];
            ups.push(UpStage {
                reduce: Conv3d::new(cin, cout, 3, 1, 1, &mut rng),
                up: Deconv3d::new(cout, cout, 2, 2, &mut rng),
                fuse: Conv3d::new(2 * cout, cout, 3, 1, 1, &mut rng),
                blocks: vec![ResBlock::new(cout, &mut rng)],
            });
        }
        let end_conv = Conv3d::new(chans[0], config.num_classes, 1, 1, 0, &mut rng);

        Ok(Model {
            config: config.clone(),
            init_conv,
            init_dropout,
            stages,
            downs,
            proj,
            pos_embed,
            tlayers,
            fmap,
            head_blocks,
            ups,
            end_conv,
        })
    }

    /// Convolutional encoder. Returns the deepest feature map plus the
    /// per-stage outputs (shallow to deep) retained for skip fusion.
    pub fn encoder_forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.encoder_forward_probed(x, mode, rng, &mut |_, _| {})
    }

    fn encoder_forward_probed(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha12Rng,
        probe: &mut dyn FnMut(String, &Tensor<T>),
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut h = self
            .init_dropout
            .forward(&self.init_conv.forward(x)?, mode, rng);
        probe("InitConv".into(), &h);
        let mut skips = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(&h, mode)?;
            }
            probe(format!("EnBlock{}", i + 1), &h);
            if i < self.downs.len() {
                skips.push(h.clone());
                h = self.downs[i].forward(&h)?;
                probe(format!("DownSample{}", i + 1), &h);
            }
        }
        Ok((h, skips))
    }

    /// Project features to the embedding width, flatten to tokens, and add
    /// the learnable position embedding. Output is `[B, N, d]`.
    pub fn embed_tokens(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let unfolded = if self.config.patch_unfold > 1 {
            unfold_patches(f, self.config.patch_unfold)?
        } else {
            f.clone()
        };
        let p = self.proj.forward(&unfolded)?;
        let (b, d) = (p.shape()[0], p.shape()[1]);
        let n: usize = p.shape()[2..].iter().product();
        let flat = ops::reshape(&p, &[b, d, n])?;
        let tokens = ops::permute(&flat, &[0, 2, 1])?; // [B, N, d]
        // Per-sample PE addition keeps broadcasting explicit.
        let mut rows = Vec::with_capacity(b);
        for bi in 0..b {
            let zb = ops::reshape(&ops::slice(&tokens, 0, bi, 1)?, &[n, d])?;
            let zb = ops::add(&zb, &self.pos_embed)?;
            rows.push(ops::reshape(&zb, &[1, n, d])?);
        }
        let refs: Vec<&Tensor<T>> = rows.iter().collect();
        ops::concat(&refs, 0)
    }

    /// Apply the stacked transformer layers per sample.
    pub fn transformer_forward(&self, z0: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, d) = (z0.shape()[0], z0.shape()[1], z0.shape()[2]);
        let mut rows = Vec::with_capacity(b);
        for bi in 0..b {
            let mut z = ops::reshape(&ops::slice(z0, 0, bi, 1)?, &[n, d])?;
            for layer in &self.tlayers {
                z = layer.forward(&z)?;
            }
            rows.push(ops::reshape(&z, &[1, n, d])?);
        }
        let refs: Vec<&Tensor<T>> = rows.iter().collect();
        ops::concat(&refs, 0)
    }

    /// Reshape tokens back onto the volume grid (inverting the flatten order
    /// of [`Model::embed_tokens`]) and reduce channels to the encoder width.
    pub fn feature_mapping(&self, zl: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, d) = (zl.shape()[0], zl.shape()[2]);
        let (gx, gy, gz) = self.config.token_grid();
        debug_assert_eq!(zl.shape()[1], gx * gy * gz);
        let grid = ops::permute(zl, &[0, 2, 1])?;
        let grid = ops::reshape(&grid, &[b, d, gx, gy, gz])?;
        let folded = if self.config.patch_unfold > 1 {
            fold_patches(&grid, self.config.patch_unfold)?
        } else {
            grid
        };
        self.fmap.forward(&folded)
    }

    /// Decoder: residual head blocks, then per stage upsample + skip fusion,
    /// finishing with the 1x1x1 classification conv. Returns logits.
    pub fn decoder_forward(
        &self,
        z: &Tensor<T>,
        skips: &[Tensor<T>],
        mode: Mode,
    ) -> Result<Tensor<T>> {
        self.decoder_forward_probed(z, skips, mode, &mut |_, _| {})
    }

    fn decoder_forward_probed(
        &self,
        z: &Tensor<T>,
        skips: &[Tensor<T>],
        mode: Mode,
        probe: &mut dyn FnMut(String, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        if skips.len() != self.ups.len() {
            return Err(TensorError::Contract(format!(
                "decoder expects {} skip maps, got {}",
                self.ups.len(),
                skips.len()
            )));
        }
        let mut h = z.clone();
        for block in &self.head_blocks {
            h = block.forward(&h, mode)?;
        }
        probe("DeBlock1".into(), &h);
        for (i, up) in self.ups.iter().enumerate() {
            let skip = &skips[skips.len() - 1 - i];
            let reduced = up.reduce.forward(&h)?;
            let upsampled = up.up.forward(&reduced)?;
            if upsampled.shape() != skip.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "skip fusion",
                    lhs: upsampled.shape().to_vec(),
                    rhs: skip.shape().to_vec(),
                });
            }
            let fused = up.fuse.forward(&ops::concat(&[&upsampled, skip], 1)?)?;
            h = fused;
            for block in &up.blocks {
                h = block.forward(&h, mode)?;
            }
            probe(format!("UpSample{}", i + 1), &upsampled);
            probe(format!("DeBlock{}", i + 2), &h);
        }
        let logits = self.end_conv.forward(&h)?;
        probe("EndConv".into(), &logits);
        Ok(logits)
    }

    /// Full forward pass to logits `[B, num_classes, H, W, D]`. Softmax is
    /// applied downstream (loss or inference), not here.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: &mut ChaCha12Rng) -> Result<Tensor<T>> {
        self.forward_probed(x, mode, rng, &mut |_, _| {})
    }

    fn forward_probed(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha12Rng,
        probe: &mut dyn FnMut(String, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        let (f, skips) = self.encoder_forward_probed(x, mode, rng, probe)?;
        let z0 = self.embed_tokens(&f)?;
        probe_tokens("LinearProjection", &z0, probe);
        let zl = self.transformer_forward(&z0)?;
        probe_tokens("Transformer", &zl, probe);
        let z = self.feature_mapping(&zl)?;
        probe("FeatureMapping".into(), &z);
        self.decoder_forward_probed(&z, &skips, mode, probe)
    }

    /// Forward pass that records each named stage's output shape,
    /// channels-first without the batch axis (token stages as `[d, N]`).
    pub fn forward_instrumented(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Tensor<T>, Vec<(String, Vec<usize>)>)> {
        let mut shapes = Vec::new();
        let out = self.forward_probed(x, mode, rng, &mut |name, t| {
            let s = t.shape();
            let reported = if name == "LinearProjection" || name == "Transformer" {
                vec![s[2], s[1]] // [d, N]
            } else {
                s[1..].to_vec() // drop batch
            };
            shapes.push((name, reported));
        })?;
        Ok((out, shapes))
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("model", &mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grads(&self) {
        self.visit("model", &mut |_, t| t.zero_grad());
    }
}

fn probe_tokens<T: Scalar>(
    name: &str,
    t: &Tensor<T>,
    probe: &mut dyn FnMut(String, &Tensor<T>),
) {
    probe(name.to_string(), t);
}

/// `[B, C, uG, uG, uG]` -> `[B, C*u^3, G, G, G]`: each u-cube becomes one
/// grid cell with its voxels moved into the channel dimension.
pub fn unfold_patches<T: Scalar>(x: &Tensor<T>, u: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let g = [s[2] / u, s[3] / u, s[4] / u];
    let r = ops::reshape(x, &[b, c, g[0], u, g[1], u, g[2], u])?;
    let p = ops::permute(&r, &[0, 1, 3, 5, 7, 2, 4, 6])?;
    ops::reshape(&p, &[b, c * u * u * u, g[0], g[1], g[2]])
}

/// Inverse of [`unfold_patches`].
pub fn fold_patches<T: Scalar>(x: &Tensor<T>, u: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let (b, cu) = (s[0], s[1]);
    let c = cu / (u * u * u);
    let g = [s[2], s[3], s[4]];
    let r = ops::reshape(x, &[b, c, u, u, u, g[0], g[1], g[2]])?;
    let p = ops::permute(&r, &[0, 1, 5, 2, 6, 3, 7, 4])?;
    ops::reshape(&p, &[b, c, g[0] * u, g[1] * u, g[2] * u])
}

impl<T: Scalar> ParamVisit<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.init_conv.visit(&format!("{prefix}.init_conv"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit(&format!("{prefix}.enc{i}.block{j}"), f);
            }
            if i < self.downs.len() {
                self.downs[i].visit(&format!("{prefix}.down{i}"), f);
            }
        }
        self.proj.visit(&format!("{prefix}.proj"), f);
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
        for (i, layer) in self.tlayers.iter().enumerate() {
            layer.visit(&format!("{prefix}.transformer{i}"), f);
        }
        self.fmap.visit(&format!("{prefix}.fmap"), f);
        for (j, block) in self.head_blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.dec_head.block{j}"), f);
        }
        for (i, up) in self.ups.iter().enumerate() {
            up.reduce.visit(&format!("{prefix}.up{i}.reduce"), f);
            up.up.visit(&format!("{prefix}.up{i}.deconv"), f);
            up.fuse.visit(&format!("{prefix}.up{i}.fuse"), f);
            for (j, block) in up.blocks.iter().enumerate() {
                block.visit(&format!("{prefix}.up{i}.block{j}"), f);
            }
        }
        self.end_conv.visit(&format!("{prefix}.end_conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.init_conv.visit_mut(&format!("{prefix}.init_conv"), f);
        let downs_n = self.downs.len();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("{prefix}.enc{i}.block{j}"), f);
            }
            if i < downs_n {
                self.downs[i].visit_mut(&format!("{prefix}.down{i}"), f);
            }
        }
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
        f(format!("{prefix}.pos_embed"), &mut self.pos_embed);
        for (i, layer) in self.tlayers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.transformer{i}"), f);
        }
        self.fmap.visit_mut(&format!("{prefix}.fmap"), f);
        for (j, block) in self.head_blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.dec_head.block{j}"), f);
        }
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.reduce.visit_mut(&format!("{prefix}.up{i}.reduce"), f);
            up.up.visit_mut(&format!("{prefix}.up{i}.deconv"), f);
            up.fuse.visit_mut(&format!("{prefix}.up{i}.fuse"), f);
            for (j, block) in up.blocks.iter_mut().enumerate() {
                block.visit_mut(&format!("{prefix}.up{i}.block{j}"), f);
            }
        }
        self.end_conv.visit_mut(&format!("{prefix}.end_conv"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &RefCell<Vec<T>>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit_buffers(&format!("{prefix}.enc{i}.block{j}"), f);
            }
        }
        for (j, block) in self.head_blocks.iter().enumerate() {
            block.visit_buffers(&format!("{prefix}.dec_head.block{j}"), f);
        }
        for (i, up) in self.ups.iter().enumerate() {
            for (j, block) in up.blocks.iter().enumerate() {
                block.visit_buffers(&format!("{prefix}.up{i}.block{j}"), f);
            }
        }
    }
}
