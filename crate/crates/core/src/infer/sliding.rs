//! Sliding-window inference with uniform overlap averaging.

use crate::metrics::class_to_label;
use crate::tensor::{Result, TensorError};

use super::VolumePredictor;

/// Window start positions along one axis: multiples of `stride`, with the
/// final window clamped to the boundary. A stride wider than the window
/// cannot tile, so it is capped at the window size; every voxel of any
/// `extent >= window` is then covered. Requires `extent >= window`.
pub fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(extent >= window && window > 0 && stride > 0);
    let stride = stride.min(window);
    let mut starts = Vec::new();
    let mut p = 0usize;
    loop {
        if p + window >= extent {
            let last = extent - window;
            if starts.last() != Some(&last) {
                starts.push(last);
            }
            break;
        }
        starts.push(p);
        p += stride;
    }
    starts
}

fn pad_volume(
    volume: &[f32],
    channels: usize,
    extent: (usize, usize, usize),
    target: (usize, usize, usize),
) -> (Vec<f32>, (usize, usize, usize), (usize, usize, usize)) {
    let (nx, ny, nz) = extent;
    let (tx, ty, tz) = (target.0.max(nx), target.1.max(ny), target.2.max(nz));
    if (tx, ty, tz) == extent {
        return (volume.to_vec(), extent, (0, 0, 0));
    }
    let (ox, oy, oz) = ((tx - nx) / 2, (ty - ny) / 2, (tz - nz) / 2);
    let (v, tv) = (nx * ny * nz, tx * ty * tz);
    let mut out = vec![0f32; channels * tv];
    for c in 0..channels {
        for x in 0..nx {
            for y in 0..ny {
                let s = c * v + (x * ny + y) * nz;
                let d = c * tv + ((x + ox) * ty + (y + oy)) * tz + oz;
                out[d..d + nz].copy_from_slice(&volume[s..s + nz]);
            }
        }
    }
    (out, (tx, ty, tz), (ox, oy, oz))
}

/// Per-class probability volume `[K, nx, ny, nz]`, averaged uniformly over
/// all windows covering each voxel. Volumes smaller than the window are
/// zero-padded for inference and the result cropped back.
pub fn sliding_window_probs<P: VolumePredictor + ?Sized>(
    predictor: &P,
    volume: &[f32],
    extent: (usize, usize, usize),
    stride: usize,
) -> Result<Vec<f32>> {
    let c = predictor.in_channels();
    let (nx, ny, nz) = extent;
    if volume.len() != c * nx * ny * nz {
        return Err(TensorError::ShapeMismatch {
            op: "sliding_window",
            lhs: vec![volume.len()],
            rhs: vec![c, nx, ny, nz],
        });
    }
    let win = predictor.window();
    let (padded, pext, off) = pad_volume(volume, c, extent, win);
    let (px, py, pz) = pext;
    let pvox = px * py * pz;
    let k = predictor.num_classes();

    let xs = window_starts(px, win.0, stride);
    let ys = window_starts(py, win.1, stride);
    let zs = window_starts(pz, win.2, stride);

    let mut acc = vec![0f32; k * pvox];
    let mut count = vec![0u32; pvox];
    let (wx, wy, wz) = win;
    let wvox = wx * wy * wz;
    let mut window_buf = vec![0f32; c * wvox];
    for &x0 in &xs {
        for &y0 in &ys {
            for &z0 in &zs {
                for ci in 0..c {
                    for x in 0..wx {
                        for y in 0..wy {
                            let s = ci * pvox + ((x0 + x) * py + (y0 + y)) * pz + z0;
                            let d = ci * wvox + (x * wy + y) * wz;
                            window_buf[d..d + wz].copy_from_slice(&padded[s..s + wz]);
                        }
                    }
                }
                let probs = predictor.predict_probs(&window_buf)?;
                debug_assert_eq!(probs.len(), k * wvox);
                for ki in 0..k {
                    for x in 0..wx {
                        for y in 0..wy {
                            let s = ki * wvox + (x * wy + y) * wz;
                            let d = ki * pvox + ((x0 + x) * py + (y0 + y)) * pz + z0;
                            for z in 0..wz {
                                acc[d + z] += probs[s + z];
                            }
                        }
                    }
                }
                for x in 0..wx {
                    for y in 0..wy {
                        let d = ((x0 + x) * py + (y0 + y)) * pz + z0;
                        for z in 0..wz {
                            count[d + z] += 1;
                        }
                    }
                }
            }
        }
    }
    debug_assert!(count.iter().all(|&n| n > 0), "every voxel must be covered");
    for ki in 0..k {
        for (i, &n) in count.iter().enumerate() {
            acc[ki * pvox + i] /= n as f32;
        }
    }

    // Crop back to the original extent.
    if pext == extent {
        return Ok(acc);
    }
    let vox = nx * ny * nz;
    let mut out = vec![0f32; k * vox];
    let (ox, oy, oz) = off;
    for ki in 0..k {
        for x in 0..nx {
            for y in 0..ny {
                let s = ki * pvox + ((x + ox) * py + (y + oy)) * pz + oz;
                let d = ki * vox + (x * ny + y) * nz;
                out[d..d + nz].copy_from_slice(&acc[s..s + nz]);
            }
        }
    }
    Ok(out)
}

/// Argmax over the averaged probability volume, remapped to the raw label
/// alphabet {0, 1, 2, 4}. Ties break toward the lower class index.
pub fn probs_to_labels(probs: &[f32], k: usize) -> Vec<u8> {
    let vox = probs.len() / k;
    (0..vox)
        .map(|i| {
            let mut best = 0usize;
            let mut best_p = probs[i];
            for ki in 1..k {
                let p = probs[ki * vox + i];
                if p > best_p {
                    best_p = p;
                    best = ki;
                }
            }
            class_to_label(best)
        })
        .collect()
}

/// End-to-end sliding-window inference to a label volume.
pub fn sliding_window_infer<P: VolumePredictor + ?Sized>(
    predictor: &P,
    volume: &[f32],
    extent: (usize, usize, usize),
    stride: usize,
) -> Result<Vec<u8>> {
    let probs = sliding_window_probs(predictor, volume, extent, stride)?;
    Ok(probs_to_labels(&probs, predictor.num_classes()))
}
