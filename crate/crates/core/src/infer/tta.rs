//! Test-time augmentation: average probabilities over the eight mirror-flip
//! variants (all subsets of the three spatial axes), un-flipping each
//! prediction before accumulation.

use crate::tensor::Result;

use super::sliding::{probs_to_labels, sliding_window_probs};
use super::VolumePredictor;

fn flip_channels(
    data: &[f32],
    channels: usize,
    extent: (usize, usize, usize),
    axes: u8,
) -> Vec<f32> {
    let (nx, ny, nz) = extent;
    let vox = nx * ny * nz;
    let mut out = vec![0f32; data.len()];
    for c in 0..channels {
        let src = &data[c * vox..(c + 1) * vox];
        let dst = &mut out[c * vox..(c + 1) * vox];
        for x in 0..nx {
            let fx = if axes & 1 != 0 { nx - 1 - x } else { x };
            for y in 0..ny {
                let fy = if axes & 2 != 0 { ny - 1 - y } else { y };
                for z in 0..nz {
                    let fz = if axes & 4 != 0 { nz - 1 - z } else { z };
                    dst[(fx * ny + fy) * nz + fz] = src[(x * ny + y) * nz + z];
                }
            }
        }
    }
    out
}

/// Probability volume averaged over the eight flip variants. Each variant
/// flips the input, runs sliding-window inference, and un-flips the
/// probability maps before accumulation. Fully deterministic.
pub fn tta_probs<P: VolumePredictor + ?Sized>(
    predictor: &P,
    volume: &[f32],
    extent: (usize, usize, usize),
    stride: usize,
) -> Result<Vec<f32>> {
    let c = predictor.in_channels();
    let k = predictor.num_classes();
    let mut acc: Option<Vec<f32>> = None;
    for axes in 0u8..8 {
        let flipped = flip_channels(volume, c, extent, axes);
        let probs = sliding_window_probs(predictor, &flipped, extent, stride)?;
        // Mirror flips are involutions: the same flip restores orientation.
        let restored = flip_channels(&probs, k, extent, axes);
        match &mut acc {
            None => acc = Some(restored),
            Some(a) => {
                for (av, rv) in a.iter_mut().zip(&restored) {
                    *av += rv;
                }
            }
        }
    }
    let mut probs = acc.expect("eight variants accumulated");
    for p in probs.iter_mut() {
        *p /= 8.0;
    }
    Ok(probs)
}

/// TTA inference to a label volume in the raw alphabet.
pub fn tta_infer<P: VolumePredictor + ?Sized>(
    predictor: &P,
    volume: &[f32],
    extent: (usize, usize, usize),
    stride: usize,
) -> Result<Vec<u8>> {
    let probs = tta_probs(predictor, volume, extent, stride)?;
    Ok(probs_to_labels(&probs, predictor.num_classes()))
}
