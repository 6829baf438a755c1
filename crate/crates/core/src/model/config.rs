//! Network configuration: every architectural degree of freedom, preset
//! configurations, and the flat `key=value` config-file format.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {what}")]
    InvalidValue { key: String, what: String },
    #[error("config invariant violated for `{field}`: {what}")]
    Invariant { field: &'static str, what: String },
    #[error("unknown preset `{0}` (expected full, lightweight, os16, os4, or tiny)")]
    UnknownPreset(String),
    #[error("malformed config line `{0}` (expected key=value)")]
    MalformedLine(String),
}

/// Where decoder skip connections attach. Only the convolutional-feature
/// placement is supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipPosition {
    Conv3d,
}

impl fmt::Display for SkipPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("conv3d")
    }
}

impl FromStr for SkipPosition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv3d" => Ok(SkipPosition::Conv3d),
            other => Err(format!("unsupported skip_position `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input modalities.
    pub in_channels: usize,
    /// Segmentation classes (background + 3 tumor labels).
    pub num_classes: usize,
    /// Channels after the initial convolution; doubles per downsample stage.
    pub base_channels: usize,
    /// Encoder output channels (must equal base_channels << downsamples).
    pub encoder_channels: usize,
    /// Token embedding width.
    pub embed_dim: usize,
    /// Number of stacked transformer layers.
    pub depth: usize,
    /// Attention heads (must divide embed_dim).
    pub heads: usize,
    /// Hidden width of the transformer feed-forward network.
    pub ffn_hidden: usize,
    /// Overall stride of the convolutional encoder (4, 8, or 16).
    pub os: usize,
    /// Patch edge folded into the token dimension (1, or 2 with os=4).
    pub patch_unfold: usize,
    pub skip_position: SkipPosition,
    /// Dropout probability after the initial convolution.
    pub dropout_p: f64,
    /// Input volume extent (H, W, D).
    pub input_extent: (usize, usize, usize),
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let full = ModelConfig {
            in_channels: 4,
            num_classes: 4,
            base_channels: 16,
            encoder_channels: 128,
            embed_dim: 512,
            depth: 4,
            heads: 8,
            ffn_hidden: 4096,
            os: 8,
            patch_unfold: 1,
            skip_position: SkipPosition::Conv3d,
            dropout_p: 0.2,
            input_extent: (128, 128, 128),
        };
        let cfg = match name {
            "full" => full,
            "lightweight" => ModelConfig {
                depth: 1,
                ffn_hidden: 2048,
                ..full
            },
            "os16" => ModelConfig {
                os: 16,
                encoder_channels: 256,
                ..full
            },
            "os4" => ModelConfig {
                os: 4,
                patch_unfold: 2,
                encoder_channels: 64,
                ..full
            },
            "tiny" => ModelConfig {
                base_channels: 8,
                encoder_channels: 64,
                embed_dim: 128,
                depth: 2,
                heads: 4,
                ffn_hidden: 512,
                input_extent: (64, 64, 64),
                ..full
            },
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of stride-2 downsample stages implied by the overall stride.
    pub fn downsamples(&self) -> usize {
        self.os.trailing_zeros() as usize
    }

    /// Channel count entering the token projection (after optional patch
    /// unfolding).
    pub fn token_in_channels(&self) -> usize {
        self.encoder_channels * self.patch_unfold.pow(3)
    }

    /// Token grid extent along each axis.
    pub fn token_grid(&self) -> (usize, usize, usize) {
        let f = self.os * self.patch_unfold;
        (
            self.input_extent.0 / f,
            self.input_extent.1 / f,
            self.input_extent.2 / f,
        )
    }

    /// Sequence length N.
    pub fn seq_len(&self) -> usize {
        let (a, b, c) = self.token_grid();
        a * b * c
    }

    /// Per-stage encoder channel progression, `base` through `encoder_channels`.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..=self.downsamples())
            .map(|i| self.base_channels << i)
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |field, what: String| Err(ConfigError::Invariant { field, what });
        if ![4, 8, 16].contains(&self.os) {
            return inv("os", format!("must be 4, 8, or 16, got {}", self.os));
        }
        if self.patch_unfold != 1 && self.patch_unfold != 2 {
            return inv(
                "patch_unfold",
                format!("must be 1 or 2, got {}", self.patch_unfold),
            );
        }
        if self.patch_unfold == 2 && self.os != 4 {
            return inv("patch_unfold", "unfolding is only used with os=4".into());
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return inv("num_classes", "need at least input channels and 2 classes".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return inv(
                "heads",
                format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads),
            );
        }
        let unfold3 = self.patch_unfold.pow(3);
        if self.embed_dim % unfold3 != 0 {
            return inv(
                "embed_dim",
                format!(
                    "must be divisible by patch_unfold^3 = {unfold3} for token fold-back"
                ),
            );
        }
        let expected = self.base_channels << self.downsamples();
        if self.encoder_channels != expected {
            return inv(
                "encoder_channels",
                format!(
                    "channel doubling from base {} over {} downsamples gives {expected}, got {}",
                    self.base_channels,
                    self.downsamples(),
                    self.encoder_channels
                ),
            );
        }
        let f = self.os * self.patch_unfold;
        for (name, e) in [
            ("input_extent.0", self.input_extent.0),
            ("input_extent.1", self.input_extent.1),
            ("input_extent.2", self.input_extent.2),
        ] {
            if e == 0 || e % f != 0 {
                return Err(ConfigError::Invariant {
                    field: "input_extent",
                    what: format!("{name} = {e} must be a positive multiple of os*patch_unfold = {f}"),
                });
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return inv("dropout_p", format!("must be in [0, 1), got {}", self.dropout_p));
        }
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |what: String| ConfigError::InvalidValue {
            key: key.to_string(),
            what,
        };
        let parse_usize = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("{e}")))
        };
        match key {
            "in_channels" => self.in_channels = parse_usize(value)?,
            "num_classes" => self.num_classes = parse_usize(value)?,
            "base_channels" => self.base_channels = parse_usize(value)?,
            "encoder_channels" => self.encoder_channels = parse_usize(value)?,
            "embed_dim" => self.embed_dim = parse_usize(value)?,
            "depth" => self.depth = parse_usize(value)?,
            "heads" => self.heads = parse_usize(value)?,
            "ffn_hidden" => self.ffn_hidden = parse_usize(value)?,
            "os" => self.os = parse_usize(value)?,
            "patch_unfold" => self.patch_unfold = parse_usize(value)?,
            "skip_position" => {
                self.skip_position = value.trim().parse().map_err(bad)?;
            }
            "dropout_p" => {
                self.dropout_p = value
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("{e}")))?;
            }
            "input_extent" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad("expected three comma-separated extents".into()));
                }
                self.input_extent = (
                    parse_usize(parts[0])?,
                    parse_usize(parts[1])?,
                    parse_usize(parts[2])?,
                );
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse the flat key=value format. Lines starting with `#` and blank
    /// lines are ignored; a `preset` key selects the starting point.
    pub fn from_key_values(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ModelConfig::preset("full")?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedLine(line.to_string()))?;
            let key = key.trim();
            if key == "preset" {
                cfg = ModelConfig::preset(value.trim())?;
            } else {
                cfg.set(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize in the same key=value format.
    pub fn to_key_values(&self) -> String {
        format!(
            "in_channels={}\nnum_classes={}\nbase_channels={}\nencoder_channels={}\n\
             embed_dim={}\ndepth={}\nheads={}\nffn_hidden={}\nos={}\npatch_unfold={}\n\
             skip_position={}\ndropout_p={}\ninput_extent={},{},{}\n",
            self.in_channels,
            self.num_classes,
            self.base_channels,
            self.encoder_channels,
            self.embed_dim,
            self.depth,
            self.heads,
            self.ffn_hidden,
            self.os,
            self.patch_unfold,
            self.skip_position,
            self.dropout_p,
            self.input_extent.0,
            self.input_extent.1,
            self.input_extent.2,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_geometry() {
        assert_eq!(ModelConfig::preset("full").unwrap().seq_len(), 4096);
        assert_eq!(ModelConfig::preset("os16").unwrap().seq_len(), 512);
        assert_eq!(ModelConfig::preset("os4").unwrap().seq_len(), 4096);
        assert_eq!(ModelConfig::preset("tiny").unwrap().seq_len(), 512);
        assert_eq!(ModelConfig::preset("lightweight").unwrap().depth, 1);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = ModelConfig::from_key_values("bogus_key=3").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "bogus_key"));
    }

    #[test]
    fn key_value_round_trip() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let text = cfg.to_key_values();
        let back = ModelConfig::from_key_values(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn channel_progression_must_double() {
        let mut cfg = ModelConfig::preset("full").unwrap();
        cfg.encoder_channels = 100;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, ConfigError::Invariant { field, .. } if field == "encoder_channels"));
    }

    #[test]
    fn extent_must_divide() {
        let mut cfg = ModelConfig::preset("full").unwrap();
        cfg.input_extent = (100, 128, 128);
        assert!(cfg.validate().is_err());
    }
}
