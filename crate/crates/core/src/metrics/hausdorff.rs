//! 95th-percentile symmetric Hausdorff distance between mask boundaries.
//!
//! Boundaries are mask voxels with at least one non-mask 6-neighbor
//! (out-of-volume neighbors count as non-mask, so voxels on the volume face
//! are boundary). Distances are Euclidean in millimeters between voxel
//! centers; the percentile is nearest-rank over each directed distance
//! multiset, and the result is the max of the two directions. Nearest
//! neighbors are found exactly with an expanding-ring search over the voxel
//! grid.

use rayon::prelude::*;

use crate::tensor::{Result, TensorError};

pub type Extent = (usize, usize, usize);
pub type Spacing = (f32, f32, f32);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    /// Set when exactly one mask was empty and the sentinel (volume
    /// diagonal) was reported.
    pub sentinel: bool,
}

/// Flat index list of boundary voxels (x, y, z triples).
pub fn boundary_voxels(mask: &[bool], extent: Extent) -> Vec<(usize, usize, usize)> {
    let (nx, ny, nz) = extent;
    let at = |x: usize, y: usize, z: usize| mask[(x * ny + y) * nz + z];
    let mut out = Vec::new();
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
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// Nearest-rank percentile of an unsorted multiset (p in (0, 100]).
pub fn nearest_rank_percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = values.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

struct BoundaryGrid<'a> {
    occupied: Vec<bool>,
    extent: Extent,
    spacing: Spacing,
    points: &'a [(usize, usize, usize)],
}

impl<'a> BoundaryGrid<'a> {
    fn new(points: &'a [(usize, usize, usize)], extent: Extent, spacing: Spacing) -> Self {
        let (nx, ny, nz) = extent;
        let mut occupied = vec![false; nx * ny * nz];
        for &(x, y, z) in points {
            occupied[(x * ny + y) * nz + z] = true;
        }
        BoundaryGrid {
            occupied,
            extent,
            spacing,
            points,
        }
    }

    fn dist2(&self, a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
        let dx = (a.0 as f64 - b.0 as f64) * self.spacing.0 as f64;
        let dy = (a.1 as f64 - b.1 as f64) * self.spacing.1 as f64;
        let dz = (a.2 as f64 - b.2 as f64) * self.spacing.2 as f64;
        dx * dx + dy * dy + dz * dz
    }

    /// Exact distance from `q` to the nearest occupied voxel. Expands
    /// Chebyshev rings; a ring at radius r cannot contain anything closer
    /// than `r * min_spacing`, which bounds the search.
    fn nearest(&self, q: (usize, usize, usize)) -> f64 {
        let (nx, ny, nz) = self.extent;
        let min_sp = self.spacing.0.min(self.spacing.1).min(self.spacing.2) as f64;
        let max_radius = nx.max(ny).max(nz);
        let mut best = f64::INFINITY;
        for r in 0..=max_radius {
            if best.is_finite() && (r as f64 * min_sp) * (r as f64 * min_sp) > best {
                break;
            }
            let xs = q.0.saturating_sub(r)..=(q.0 + r).min(nx - 1);
            for x in xs {
                let on_x_face = x + r == q.0 || x == q.0 + r;
                let ys = q.1.saturating_sub(r)..=(q.1 + r).min(ny - 1);
                for y in ys.clone() {
                    let on_y_face = y + r == q.1 || y == q.1 + r;
                    if on_x_face || on_y_face {
                        // full z rows on x/y faces of the ring shell
                        let zs = q.2.saturating_sub(r)..=(q.2 + r).min(nz - 1);
                        for z in zs {
                            if self.occupied[(x * ny + y) * nz + z] {
                                best = best.min(self.dist2(q, (x, y, z)));
                            }
                        }
                    } else {
                        // interior (x, y): only the two z faces are new
                        for z in [q.2.checked_sub(r), Some(q.2 + r)].into_iter().flatten() {
                            if z < nz && self.occupied[(x * ny + y) * nz + z] {
                                best = best.min(self.dist2(q, (x, y, z)));
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(best.is_finite() || self.points.is_empty());
        best.sqrt()
    }
}

fn directed_distances(
    from: &[(usize, usize, usize)],
    to_grid: &BoundaryGrid,
) -> Vec<f64> {
    from.par_iter().map(|&p| to_grid.nearest(p)).collect()
}

/// Symmetric 95% Hausdorff distance in millimeters between two masks.
///
/// Both masks empty reports 0; exactly one empty reports the volume
/// diagonal as a flagged sentinel.
pub fn hausdorff95(
    pred: &[bool],
    gt: &[bool],
    extent: Extent,
    spacing: Spacing,
) -> Result<Hd95> {
    let n = extent.0 * extent.1 * extent.2;
    if pred.len() != n || gt.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "hausdorff95",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let pb = boundary_voxels(pred, extent);
    let gb = boundary_voxels(gt, extent);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(Hd95 { value: 0.0, sentinel: false }),
        (true, false) | (false, true) => {
            let dx = extent.0 as f64 * spacing.0 as f64;
            let dy = extent.1 as f64 * spacing.1 as f64;
            let dz = extent.2 as f64 * spacing.2 as f64;
            return Ok(Hd95 {
                value: (dx * dx + dy * dy + dz * dz).sqrt(),
                sentinel: true,
            });
        }
        _ => {}
    }
    let pg = BoundaryGrid::new(&pb, extent, spacing);
    let gg = BoundaryGrid::new(&gb, extent, spacing);
    let mut d_pg = directed_distances(&pb, &gg);
    let mut d_gp = directed_distances(&gb, &pg);
    let h_pg = nearest_rank_percentile(&mut d_pg, 95.0);
    let h_gp = nearest_rank_percentile(&mut d_gp, 95.0);
    Ok(Hd95 {
        value: h_pg.max(h_gp),
        sentinel: false,
    })
}
