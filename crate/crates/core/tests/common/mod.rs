//! Shared test oracles, independent of the implementation paths they check:
//! a naive nested-loop 3D convolution, a brute-force all-pairs Hausdorff,
//! and helpers for seeded random tensors.

#![allow(dead_code)]

pub mod gradchecks;
pub mod oracle_trials;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use volseg_core::Scalar;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Reference 3D convolution: direct sum over every kernel tap for every
/// output voxel, in f64.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_reference(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    b: usize,
    cin: usize,
    cout: usize,
    in_ext: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    let (ind, inh, inw) = in_ext;
    let out_of = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out_of(ind), out_of(inh), out_of(inw));
    let in_vox = ind * inh * inw;
    let out_vox = od * oh * ow;
    let mut out = vec![0f64; b * cout * out_vox];
    for bi in 0..b {
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[co]);
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= ind as isize
                                            || iy >= inh as isize
                                            || ix >= inw as isize
                                        {
                                            continue;
                                        }
                                        let xi = (bi * cin + ci) * in_vox
                                            + ((iz as usize) * inh + iy as usize) * inw
                                            + ix as usize;
                                        let wi = ((co * cin + ci) * k * k + kz * k + ky) * k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(bi * cout + co) * out_vox + (oz * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    (out, (od, oh, ow))
}

/// Brute-force 95% Hausdorff: all-pairs distances between boundary voxel
/// sets, nearest-rank percentile per direction, max of the two.
pub fn hausdorff95_reference(
    pred: &[bool],
    gt: &[bool],
    extent: (usize, usize, usize),
    spacing: (f32, f32, f32),
) -> f64 {
    let boundary = |mask: &[bool]| {
        let (nx, ny, nz) = extent;
        let at = |x: usize, y: usize, z: usize| mask[(x * ny + y) * nz + z];
        let mut pts = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if !at(x, y, z) {
                        continue;
                    }
                    let exposed = (x == 0 || !at(x - 1, y, z))
                        || (x + 1 == nx || !at(x + 1, y, z))
                        || (y == 0 || !at(x, y - 1, z))
                        || (y + 1 == ny || !at(x, y + 1, z))
                        || (z == 0 || !at(x, y, z - 1))
                        || (z + 1 == nz || !at(x, y, z + 1));
                    if exposed {
                        pts.push((x as f64, y as f64, z as f64));
                    }
                }
            }
        }
        pts
    };
    let pb = boundary(pred);
    let gb = boundary(gt);
    if pb.is_empty() && gb.is_empty() {
        return 0.0;
    }
    if pb.is_empty() || gb.is_empty() {
        let dx = extent.0 as f64 * spacing.0 as f64;
        let dy = extent.1 as f64 * spacing.1 as f64;
        let dz = extent.2 as f64 * spacing.2 as f64;
        return (dx * dx + dy * dy + dz * dz).sqrt();
    }
    let directed = |from: &[(f64, f64, f64)], to: &[(f64, f64, f64)]| {
        let mut dists: Vec<f64> = from
            .iter()
            .map(|&(x, y, z)| {
                to.iter()
                    .map(|&(gx, gy, gz)| {
                        let dx = (x - gx) * spacing.0 as f64;
                        let dy = (y - gy) * spacing.1 as f64;
                        let dz = (z - gz) * spacing.2 as f64;
                        (dx * dx + dy * dy + dz * dz).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = dists.len();
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        dists[rank - 1]
    };
    directed(&pb, &gb).max(directed(&gb, &pb))
}

/// Random blob-ish mask: a few random balls plus salt, for oracle trials.
pub fn random_mask(rng: &mut ChaCha12Rng, extent: (usize, usize, usize)) -> Vec<bool> {
    let (nx, ny, nz) = extent;
    let mut mask = vec![false; nx * ny * nz];
    let balls = rng.gen_range(0..3);
    for _ in 0..balls {
        let c = (
            rng.gen_range(0..nx) as f64,
            rng.gen_range(0..ny) as f64,
            rng.gen_range(0..nz) as f64,
        );
        let r = rng.gen_range(1.0..(nx.min(ny).min(nz) as f64 / 2.0));
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let d = (x as f64 - c.0).powi(2)
                        + (y as f64 - c.1).powi(2)
                        + (z as f64 - c.2).powi(2);
                    if d <= r * r {
                        mask[(x * ny + y) * nz + z] = true;
                    }
                }
            }
        }
    }
    let salt = rng.gen_range(0..8);
    for _ in 0..salt {
        let i = rng.gen_range(0..mask.len());
        mask[i] = true;
    }
    mask
}
