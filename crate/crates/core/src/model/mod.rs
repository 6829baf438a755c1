//! Network assembly, configuration space, and complexity accounting.

pub mod complexity;
pub mod config;
pub mod network;

pub use complexity::{complexity, count_flops, count_params, ComplexityReport, StageCost};
pub use config::{ConfigError, ModelConfig, SkipPosition};
pub use network::{fold_patches, unfold_patches, Model, ResBlock};
