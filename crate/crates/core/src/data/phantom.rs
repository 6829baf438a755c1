//! Synthetic brain-like phantoms: a smooth ellipsoidal "brain" with nested
//! tumor ellipsoids labeled 2 (edema shell), 1 (necrotic middle), and 4
//! (enhancing core). Modalities differ by per-region contrast multipliers,
//! giving each label a distinct intensity signature across channels.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, VolumeSample};

#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub extent: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    /// Whole-tumor radius range as a fraction of the smallest extent.
    pub tumor_radius_frac: (f64, f64),
    /// Gaussian intensity noise inside the brain.
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: (128, 128, 128),
            spacing: (1.0, 1.0, 1.0),
            tumor_radius_frac: (0.18, 0.26),
            noise_sigma: 0.05,
        }
    }
}

/// Region intensity multipliers per modality (t1, t1ce, t2, flair) for
/// healthy tissue, edema, necrotic core, and enhancing core. Signatures are
/// well separated so the regions are learnable from local intensity alone.
const REGION_INTENSITY: [[f64; 4]; 4] = [
    // brain, edema(2), necrotic(1), enhancing(4)
    [1.00, 0.75, 0.50, 1.25], // t1
    [1.00, 0.80, 0.45, 2.20], // t1ce
    [0.90, 1.80, 1.50, 1.10], // t2
    [0.95, 2.00, 1.20, 1.30], // flair
];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.radii[i];
            acc += d * d;
        }
        acc <= 1.0
    }
}

/// Generate one phantom case. Deterministic in the RNG state; every
/// generated case contains all four labels.
pub fn generate_phantom(
    case_id: &str,
    spec: &PhantomSpec,
    rng: &mut ChaCha12Rng,
) -> Result<VolumeSample, DataError> {
    let (nx, ny, nz) = spec.extent;
    let ext = [nx as f64, ny as f64, nz as f64];
    let min_ext = ext[0].min(ext[1]).min(ext[2]);

    let brain = Ellipsoid {
        center: [
            ext[0] / 2.0 + rng.gen_range(-0.02..0.02) * ext[0],
            ext[1] / 2.0 + rng.gen_range(-0.02..0.02) * ext[1],
            ext[2] / 2.0 + rng.gen_range(-0.02..0.02) * ext[2],
        ],
        radii: [
            ext[0] * rng.gen_range(0.38..0.45),
            ext[1] * rng.gen_range(0.38..0.45),
            ext[2] * rng.gen_range(0.38..0.45),
        ],
    };

    let (fr_lo, fr_hi) = spec.tumor_radius_frac;
    let base_r = min_ext * rng.gen_range(fr_lo..=fr_hi);
    let wt_radii = [
        base_r * rng.gen_range(0.85..1.15),
        base_r * rng.gen_range(0.85..1.15),
        base_r * rng.gen_range(0.85..1.15),
    ];

    // Place the whole tumor strictly inside the brain ellipsoid.
    let mut tumor_center = None;
    for _ in 0..200 {
        let mut c = [0.0f64; 3];
        let mut feasible = true;
        for i in 0..3 {
            let slack = brain.radii[i] * 0.85 - wt_radii[i];
            if slack <= 0.0 {
                feasible = false;
                break;
            }
            c[i] = brain.center[i] + rng.gen_range(-slack..=slack) * 0.6;
        }
        if feasible {
            tumor_center = Some(c);
            break;
        }
    }
    let center = tumor_center.ok_or_else(|| {
        DataError::Phantom(format!(
            "tumor radii {wt_radii:?} cannot fit inside brain radii {:?}",
            brain.radii
        ))
    })?;

    let tc_frac = rng.gen_range(0.55..0.68);
    let et_frac = rng.gen_range(0.50..0.65);
    let wt = Ellipsoid { center, radii: wt_radii };
    let tc = Ellipsoid {
        center,
        radii: [wt_radii[0] * tc_frac, wt_radii[1] * tc_frac, wt_radii[2] * tc_frac],
    };
    let et = Ellipsoid {
        center,
        radii: [
            tc.radii[0] * et_frac,
            tc.radii[1] * et_frac,
            tc.radii[2] * et_frac,
        ],
    };

    let voxels = nx * ny * nz;
    let mut label = vec![0u8; voxels];
    let mut region = vec![0u8; voxels]; // 0 bg, 1 brain, 2 edema, 3 necrotic, 4 enhancing
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let idx = (x * ny + y) * nz + z;
                if !brain.contains(p) {
                    continue;
                }
                let (reg, lab) = if et.contains(p) {
                    (4, 4)
                } else if tc.contains(p) {
                    (3, 1)
                } else if wt.contains(p) {
                    (2, 2)
                } else {
                    (1, 0)
                };
                region[idx] = reg;
                label[idx] = lab;
            }
        }
    }

    for need in [1u8, 2, 4] {
        if !label.contains(&need) {
            return Err(DataError::Phantom(format!(
                "generated case is missing label {need} (tumor too small for extent {:?})",
                spec.extent
            )));
        }
    }

    let mut modalities = vec![0f32; 4 * voxels];
    for (m, channel) in REGION_INTENSITY.iter().enumerate() {
        let out = &mut modalities[m * voxels..(m + 1) * voxels];
        for x in 0..nx {
            // mild smooth gradient across the volume for texture
            let grad = 1.0 + 0.08 * (x as f64 / ext[0] - 0.5);
            for y in 0..ny {
                for z in 0..nz {
                    let idx = (x * ny + y) * nz + z;
                    let reg = region[idx];
                    if reg == 0 {
                        continue;
                    }
                    let base = match reg {
                        1 => channel[0],
                        2 => channel[1],
                        3 => channel[2],
                        _ => channel[3],
                    };
                    let noise: f64 = StandardNormal.sample(rng);
                    let v = base * grad + noise * spec.noise_sigma;
                    out[idx] = v.max(0.02) as f32;
                }
            }
        }
    }

    let sample = VolumeSample {
        case_id: case_id.to_string(),
        modalities,
        channels: 4,
        extent: spec.extent,
        label: Some(label),
        spacing: spec.spacing,
    };
    sample.validate()?;
    Ok(sample)
}

/// Derive the generator for case `index` of a dataset seeded by `seed`.
pub fn case_rng(seed: u64, index: usize) -> ChaCha12Rng {
    super::augment::sample_rng(seed, &format!("phantom_{index:03}"), 0)
}

/// Generate `count` cases under `root` in the case-directory layout.
pub fn generate_dataset(
    root: &std::path::Path,
    count: usize,
    seed: u64,
    spec: &PhantomSpec,
) -> Result<Vec<String>, DataError> {
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let case_id = format!("phantom_{i:03}");
        let sample = generate_phantom(&case_id, spec, &mut case_rng(seed, i))?;
        super::rawvol::write_case(root, &sample)?;
        ids.push(case_id);
    }
    Ok(ids)
}
