//! Closed-form parameter and FLOP accounting over the layer inventory.
//!
//! Conventions: 1 MAC = 2 FLOPs, so a convolution contributes
//! `2 * cin * cout * k^3 * out_voxels` and a linear map `2 * rows * in * out`.
//! Attention score and value aggregation together contribute `2 * N^2 * d`
//! per layer; the feed-forward network `2 * (2 * N * d * h)`. Cheap
//! elementwise work (norms, activations, residual adds, softmax) is not
//! counted. Parameter counts include biases, norm affines, and the position
//! embedding.

use super::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct StageCost {
    pub name: String,
    /// Output shape, channels-first without batch (token stages as [d, N]).
    pub out_shape: Vec<usize>,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct ComplexityReport {
    pub stages: Vec<StageCost>,
    pub seq_len: usize,
}

impl ComplexityReport {
    pub fn total_params(&self) -> u64 {
        self.stages.iter().map(|s| s.params).sum()
    }
    pub fn total_flops(&self) -> u64 {
        self.stages.iter().map(|s| s.flops).sum()
    }
}

fn conv_params(cin: u64, cout: u64, k: u64) -> u64 {
    cout * cin * k * k * k + cout // weight + bias
}

fn conv_flops(cin: u64, cout: u64, k: u64, out_vox: u64) -> u64 {
    2 * cin * cout * k * k * k * out_vox
}

fn bn_params(c: u64) -> u64 {
    2 * c // gamma + beta
}

/// One residual block: two BN + conv(3) units at constant channels.
fn res_block_params(c: u64) -> u64 {
    2 * (bn_params(c) + conv_params(c, c, 3))
}

fn res_block_flops(c: u64, vox: u64) -> u64 {
    2 * conv_flops(c, c, 3, vox)
}

/// Analytic complexity table for a configuration; mirrors the built model's
/// layer inventory stage by stage.
pub fn complexity(config: &ModelConfig) -> ComplexityReport {
    let mut stages = Vec::new();
    let chans = config.stage_channels();
    let downs_n = config.downsamples();
    let (h, w, d) = config.input_extent;
    let vox0 = (h * w * d) as u64;
    let dim = config.embed_dim as u64;
    let n = config.seq_len() as u64;
    let heads_hidden = config.ffn_hidden as u64;

    let shape_at = |c: usize, level: usize| {
        let f = 1usize << level;
        vec![c, h / f, w / f, d / f]
    };

    stages.push(StageCost {
        name: "InitConv".into(),
        out_shape: shape_at(chans[0], 0),
        params: conv_params(config.in_channels as u64, chans[0] as u64, 3),
        flops: conv_flops(config.in_channels as u64, chans[0] as u64, 3, vox0),
    });

    for (i, &c) in chans.iter().enumerate() {
        let vox = vox0 >> (3 * i);
        let blocks = if i == 0 { 1u64 } else { 2 };
        stages.push(StageCost {
            name: format!("EnBlock{}", i + 1),
            out_shape: shape_at(c, i),
            params: blocks * res_block_params(c as u64),
            flops: blocks * res_block_flops(c as u64, vox),
        });
        if i < downs_n {
            let vox_out = vox >> 3;
            stages.push(StageCost {
                name: format!("DownSample{}", i + 1),
                out_shape: shape_at(chans[i + 1], i + 1),
                params: conv_params(c as u64, chans[i + 1] as u64, 3),
                flops: conv_flops(c as u64, chans[i + 1] as u64, 3, vox_out),
            });
        }
    }

    let grid_vox = n;
    stages.push(StageCost {
        name: "LinearProjection".into(),
        out_shape: vec![dim as usize, n as usize],
        params: conv_params(config.token_in_channels() as u64, dim, 3) + n * dim, // + PE
        flops: conv_flops(config.token_in_channels() as u64, dim, 3, grid_vox),
    });

    let per_layer_params =
        4 * (dim * dim + dim)                    // q, k, v, o projections
        + 2 * (2 * dim)                          // two layer norms
        + (dim * heads_hidden + heads_hidden)    // ffn in
        + (heads_hidden * dim + dim); // ffn out
    let per_layer_flops = 2 * 4 * n * dim * dim  // q, k, v, o projections
        + 2 * n * n * dim                        // attention scores + value aggregation
        + 2 * (2 * n * dim * heads_hidden); // ffn
    stages.push(StageCost {
        name: "Transformer".into(),
        out_shape: vec![dim as usize, n as usize],
        params: config.depth as u64 * per_layer_params,
        flops: config.depth as u64 * per_layer_flops,
    });

    let k_ch = config.encoder_channels as u64;
    let fmap_in = dim / (config.patch_unfold.pow(3) as u64);
    stages.push(StageCost {
        name: "FeatureMapping".into(),
        out_shape: shape_at(config.encoder_channels, downs_n),
        params: conv_params(fmap_in, k_ch, 3),
        flops: conv_flops(fmap_in, k_ch, 3, vox0 >> (3 * downs_n)),
    });

    stages.push(StageCost {
        name: "DeBlock1".into(),
        out_shape: shape_at(config.encoder_channels, downs_n),
        params: 2 * res_block_params(k_ch),
        flops: 2 * res_block_flops(k_ch, vox0 >> (3 * downs_n)),
    });

    for i in (0..downs_n).rev() {
        let cin = chans[i + 1] as u64;
        let cout = chans[i] as u64;
        let vox_in = vox0 >> (3 * (i + 1));
        let vox_out = vox0 >> (3 * i);
        let stage_idx = downs_n - i;
        // reduce conv at input extent, deconv (k=2, s=2, no bias), fuse conv
        // from concatenated channels at output extent
        let params = conv_params(cin, cout, 3)
            + cout * cout * 8
            + conv_params(2 * cout, cout, 3);
        let flops = conv_flops(cin, cout, 3, vox_in)
            + 2 * cout * cout * 8 * vox_in // deconv: k^3 taps per input voxel
            + conv_flops(2 * cout, cout, 3, vox_out);
        stages.push(StageCost {
            name: format!("UpSample{stage_idx}"),
            out_shape: shape_at(cout as usize, i),
            params,
            flops,
        });
        stages.push(StageCost {
            name: format!("DeBlock{}", stage_idx + 1),
            out_shape: shape_at(cout as usize, i),
            params: res_block_params(cout),
            flops: res_block_flops(cout, vox_out),
        });
    }

    stages.push(StageCost {
        name: "EndConv".into(),
        out_shape: vec![config.num_classes, h, w, d],
        params: conv_params(chans[0] as u64, config.num_classes as u64, 1),
        flops: conv_flops(chans[0] as u64, config.num_classes as u64, 1, vox0),
    });

    ComplexityReport {
        stages,
        seq_len: config.seq_len(),
    }
}

/// Total trainable parameters for a configuration.
pub fn count_params(config: &ModelConfig) -> u64 {
    complexity(config).total_params()
}

/// Total forward FLOPs for a configuration at its input extent.
pub fn count_flops(config: &ModelConfig) -> u64 {
    complexity(config).total_flops()
}
