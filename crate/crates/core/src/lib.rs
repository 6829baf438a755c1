//! Volumetric segmentation engine: a 3D CNN encoder, a transformer bottleneck
//! over flattened volume tokens, and a progressive-upsampling decoder, built
//! on an in-crate reverse-mode autodiff substrate. Includes the full training
//! recipe (softmax Dice loss, Adam with polynomial decay, augmentation),
//! NIfTI-1 and raw-volume ingestion, synthetic phantom generation, and the
//! Dice / 95% Hausdorff evaluation protocol.

pub mod data;
pub mod layers;
pub mod infer;
pub mod metrics;
pub mod train;
pub mod model;
pub mod tensor;

pub use tensor::{no_grad, Scalar, Tensor, TensorError};
