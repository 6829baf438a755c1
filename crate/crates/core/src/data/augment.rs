//! Intensity normalization and the training augmentation pipeline:
//! random crop, random mirror flips, random intensity shift/scale.
//!
//! Every step is a pure function of `(sample, rng)`; per-sample generators
//! derive from `(global_seed, case_id, epoch)` so the pipeline can run in
//! parallel and replay exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::VolumeSample;

/// Z-score over nonzero voxels only; background zeros stay exactly zero.
/// An all-zero volume is returned unchanged.
pub fn normalize_zscore(volume: &mut [f32]) {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &v in volume.iter() {
        if v != 0.0 {
            sum += v as f64;
            count += 1;
        }
    }
    if count == 0 {
        return;
    }
    let mean = sum / count as f64;
    let mut ss = 0.0f64;
    for &v in volume.iter() {
        if v != 0.0 {
            let d = v as f64 - mean;
            ss += d * d;
        }
    }
    let std = (ss / count as f64).sqrt().max(1e-8);
    for v in volume.iter_mut() {
        if *v != 0.0 {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
}

/// Normalize every modality of a sample in place.
pub fn normalize_sample(sample: &mut VolumeSample) {
    for c in 0..sample.channels {
        normalize_zscore(sample.modality_mut(c));
    }
}

fn crop_axis(extent: usize, target: usize, rng: &mut ChaCha12Rng) -> usize {
    if extent <= target {
        0
    } else {
        rng.gen_range(0..=extent - target)
    }
}

/// Symmetric zero-pad up to `target` per axis (label padded with background).
fn pad_to(sample: &VolumeSample, target: (usize, usize, usize)) -> VolumeSample {
    let (nx, ny, nz) = sample.extent;
    let (tx, ty, tz) = (target.0.max(nx), target.1.max(ny), target.2.max(nz));
    if (tx, ty, tz) == sample.extent {
        return sample.clone();
    }
    let (ox, oy, oz) = ((tx - nx) / 2, (ty - ny) / 2, (tz - nz) / 2);
    let tv = tx * ty * tz;
    let mut modalities = vec![0f32; sample.channels * tv];
    for c in 0..sample.channels {
        let src = sample.modality(c);
        let dst = &mut modalities[c * tv..(c + 1) * tv];
        for x in 0..nx {
            for y in 0..ny {
                let s = (x * ny + y) * nz;
                let d = ((x + ox) * ty + (y + oy)) * tz + oz;
                dst[d..d + nz].copy_from_slice(&src[s..s + nz]);
            }
        }
    }
    let label = sample.label.as_ref().map(|lab| {
        let mut out = vec![0u8; tv];
        for x in 0..nx {
            for y in 0..ny {
                let s = (x * ny + y) * nz;
                let d = ((x + ox) * ty + (y + oy)) * tz + oz;
                out[d..d + nz].copy_from_slice(&lab[s..s + nz]);
            }
        }
        out
    });
    VolumeSample {
        case_id: sample.case_id.clone(),
        modalities,
        channels: sample.channels,
        extent: (tx, ty, tz),
        label,
        spacing: sample.spacing,
    }
}

/// Crop a `target` window starting at `(x0, y0, z0)`; the same window is
/// applied to every modality and the label.
pub fn crop_at(
    sample: &VolumeSample,
    target: (usize, usize, usize),
    start: (usize, usize, usize),
) -> VolumeSample {
    let src = sample;
    let (nx, ny, nz) = src.extent;
    let (tx, ty, tz) = target;
    let (x0, y0, z0) = start;
    assert!(x0 + tx <= nx && y0 + ty <= ny && z0 + tz <= nz, "crop window out of range");
    let tv = tx * ty * tz;
    let mut modalities = vec![0f32; src.channels * tv];
    for c in 0..src.channels {
        let vol = src.modality(c);
        let dst = &mut modalities[c * tv..(c + 1) * tv];
        for x in 0..tx {
            for y in 0..ty {
                let s = ((x + x0) * ny + (y + y0)) * nz + z0;
                let d = (x * ty + y) * tz;
                dst[d..d + tz].copy_from_slice(&vol[s..s + tz]);
            }
        }
    }
    let label = src.label.as_ref().map(|lab| {
        let mut out = vec![0u8; tv];
        for x in 0..tx {
            for y in 0..ty {
                let s = ((x + x0) * ny + (y + y0)) * nz + z0;
                let d = (x * ty + y) * tz;
                out[d..d + tz].copy_from_slice(&lab[s..s + tz]);
            }
        }
        out
    });
    VolumeSample {
        case_id: src.case_id.clone(),
        modalities,
        channels: src.channels,
        extent: target,
        label,
        spacing: src.spacing,
    }
}

fn pad_if_needed(sample: &VolumeSample, target: (usize, usize, usize)) -> VolumeSample {
    if sample.extent.0 < target.0 || sample.extent.1 < target.1 || sample.extent.2 < target.2 {
        pad_to(sample, target)
    } else {
        sample.clone()
    }
}

/// Random crop to `target` with start indices uniform over the valid range.
/// Inputs smaller than the crop are symmetrically zero-padded first.
pub fn random_crop(
    sample: &VolumeSample,
    target: (usize, usize, usize),
    rng: &mut ChaCha12Rng,
) -> VolumeSample {
    let src = pad_if_needed(sample, target);
    let start = (
        crop_axis(src.extent.0, target.0, rng),
        crop_axis(src.extent.1, target.1, rng),
        crop_axis(src.extent.2, target.2, rng),
    );
    crop_at(&src, target, start)
}

/// Deterministic crop from the volume center (padding first if needed).
pub fn center_crop(sample: &VolumeSample, target: (usize, usize, usize)) -> VolumeSample {
    let src = pad_if_needed(sample, target);
    let start = (
        (src.extent.0 - target.0) / 2,
        (src.extent.1 - target.1) / 2,
        (src.extent.2 - target.2) / 2,
    );
    crop_at(&src, target, start)
}

fn flip_axis_inplace<TVal: Copy>(
    data: &mut [TVal],
    extent: (usize, usize, usize),
    axis: usize,
) {
    let (nx, ny, nz) = extent;
    match axis {
        0 => {
            for x in 0..nx / 2 {
                let xr = nx - 1 - x;
                for y in 0..ny {
                    for z in 0..nz {
                        data.swap((x * ny + y) * nz + z, (xr * ny + y) * nz + z);
                    }
                }
            }
        }
        1 => {
            for x in 0..nx {
                for y in 0..ny / 2 {
                    let yr = ny - 1 - y;
                    for z in 0..nz {
                        data.swap((x * ny + y) * nz + z, (x * ny + yr) * nz + z);
                    }
                }
            }
        }
        _ => {
            for x in 0..nx {
                for y in 0..ny {
                    let row = (x * ny + y) * nz;
                    data[row..row + nz].reverse();
                }
            }
        }
    }
}

/// Flip a sample along one spatial axis (modalities and label together).
pub fn flip_sample(sample: &mut VolumeSample, axis: usize) {
    let extent = sample.extent;
    for c in 0..sample.channels {
        flip_axis_inplace(sample.modality_mut(c), extent, axis);
    }
    if let Some(label) = &mut sample.label {
        flip_axis_inplace(label, extent, axis);
    }
}

/// Mirror each of the three axes independently with probability 0.5.
pub fn random_flip(sample: &mut VolumeSample, rng: &mut ChaCha12Rng) {
    for axis in 0..3 {
        if rng.gen::<f64>() < 0.5 {
            flip_sample(sample, axis);
        }
    }
}

/// Per modality: nonzero voxels map `x -> x*s + delta` with
/// `s ~ U[0.9, 1.1]`, `delta ~ U[-0.1, 0.1]`. Labels untouched; background
/// zeros stay exactly zero.
pub fn random_intensity(sample: &mut VolumeSample, rng: &mut ChaCha12Rng) {
    for c in 0..sample.channels {
        let s = rng.gen_range(0.9f32..=1.1);
        let delta = rng.gen_range(-0.1f32..=0.1);
        for v in sample.modality_mut(c) {
            if *v != 0.0 {
                *v = *v * s + delta;
            }
        }
    }
}

/// Derive the per-sample augmentation stream from the global seed, case id,
/// and epoch (splitmix-style mixing).
pub fn sample_rng(global_seed: u64, case_id: &str, epoch: usize) -> ChaCha12Rng {
    let mut h = global_seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in case_id.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    h = (h ^ epoch as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    ChaCha12Rng::seed_from_u64(h)
}

/// The full training pipeline: crop to the model extent, random flips,
/// random intensity shift/scale. Pure in `(sample, rng state)`.
pub fn augment(
    sample: &VolumeSample,
    target: (usize, usize, usize),
    rng: &mut ChaCha12Rng,
) -> VolumeSample {
    let mut out = random_crop(sample, target, rng);
    random_flip(&mut out, rng);
    random_intensity(&mut out, rng);
    out
}
