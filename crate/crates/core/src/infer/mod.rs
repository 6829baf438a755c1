//! Full-volume inference: sliding windows with overlap averaging, and
//! test-time augmentation over the eight mirror-flip variants.

pub mod sliding;
pub mod tta;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub use sliding::{sliding_window_infer, sliding_window_probs, window_starts};
pub use tta::{tta_infer, tta_probs};

use crate::layers::Mode;
use crate::model::Model;
use crate::tensor::ops;
use crate::tensor::{Result, Tensor};

/// A model viewed as a window-probability oracle. Implemented by the real
/// network and by test stubs.
pub trait VolumePredictor {
    fn in_channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Window extent the predictor accepts.
    fn window(&self) -> (usize, usize, usize);
    /// `[C, wx, wy, wz]` intensities -> `[K, wx, wy, wz]` class probabilities.
    fn predict_probs(&self, window: &[f32]) -> Result<Vec<f32>>;
}

impl VolumePredictor for Model<f32> {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn window(&self) -> (usize, usize, usize) {
        self.config.input_extent
    }

    fn predict_probs(&self, window: &[f32]) -> Result<Vec<f32>> {
        let (wx, wy, wz) = self.window();
        let c = self.in_channels();
        let x = Tensor::from_vec(window.to_vec(), &[1, c, wx, wy, wz]);
        crate::no_grad(|| {
            let mut rng = ChaCha12Rng::seed_from_u64(0); // unused in eval mode
            let logits = self.forward(&x, Mode::Eval, &mut rng)?;
            let probs = ops::softmax(&logits, 1)?;
            Ok(probs.data().to_vec())
        })
    }
}
