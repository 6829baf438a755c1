//! Property-based invariants: softmax normalization, shape-op round trips,
//! metric symmetries, region nesting, and sliding-window coverage.

mod common;

use common::{random_mask, rng};
use proptest::prelude::*;
use rand::Rng;

use volseg_core::data::augment::{augment, sample_rng};
use volseg_core::data::VolumeSample;
use volseg_core::infer::window_starts;
use volseg_core::metrics::{dice_score, hausdorff95, region_binarize, RegionMapping};
use volseg_core::tensor::ops;
use volseg_core::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..8,
        scale in 1f64..1e4,
        seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| r.gen_range(-1.0..1.0) * scale)
            .collect();
        let t = Tensor::from_vec(data, &[rows, cols]);
        let s = ops::softmax(&t, 1).unwrap();
        for row in s.data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            // Extreme magnitudes may underflow individual entries to 0.
            prop_assert!(row.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p) && p.is_finite()));
        }
    }

    #[test]
    fn reshape_permute_round_trip_bit_exact(
        a in 1usize..5,
        b in 1usize..5,
        c in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let data: Vec<f32> = (0..a * b * c).map(|_| r.gen::<f32>()).collect();
        let t = Tensor::from_vec(data.clone(), &[a, b, c]);
        let reshaped = ops::reshape(&ops::reshape(&t, &[c * b * a]).unwrap(), &[a, b, c]).unwrap();
        prop_assert_eq!(reshaped.data(), &data[..]);
        let p = ops::permute(&t, &[2, 0, 1]).unwrap();
        let back = ops::permute(&p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(back.shape(), &[a, b, c]);
        prop_assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn dice_symmetric_and_flip_invariant(seed in 0u64..500) {
        let mut r = rng(seed);
        let e = r.gen_range(3..=8usize);
        let extent = (e, e, e);
        let p = random_mask(&mut r, extent);
        let g = random_mask(&mut r, extent);
        let d1 = dice_score(&p, &g).unwrap();
        let d2 = dice_score(&g, &p).unwrap();
        prop_assert_eq!(d1, d2);
        // flip both masks along x: overlap counts unchanged
        let flip = |m: &[bool]| -> Vec<bool> {
            let mut out = vec![false; m.len()];
            for x in 0..e {
                for y in 0..e {
                    for z in 0..e {
                        out[((e - 1 - x) * e + y) * e + z] = m[(x * e + y) * e + z];
                    }
                }
            }
            out
        };
        let d3 = dice_score(&flip(&p), &flip(&g)).unwrap();
        prop_assert_eq!(d1, d3);
    }

    #[test]
    fn hausdorff_symmetric(seed in 0u64..200) {
        let mut r = rng(seed);
        let e = r.gen_range(3..=10usize);
        let extent = (e, e, e);
        let p = random_mask(&mut r, extent);
        let g = random_mask(&mut r, extent);
        let a = hausdorff95(&p, &g, extent, (1.0, 1.3, 0.8)).unwrap();
        let b = hausdorff95(&g, &p, extent, (1.0, 1.3, 0.8)).unwrap();
        prop_assert_eq!(a.value, b.value);
    }

    #[test]
    fn sliding_window_covers_every_voxel(
        extent in 16usize..300,
        window in prop::sample::select(vec![8usize, 16, 32]),
        stride in 1usize..32,
    ) {
        prop_assume!(extent >= window);
        let starts = window_starts(extent, window, stride);
        let mut cover = vec![0u32; extent];
        for &s in &starts {
            for c in cover.iter_mut().skip(s).take(window) {
                *c += 1;
            }
        }
        prop_assert!(cover.iter().all(|&c| c > 0));
        // the clamped final window reaches the boundary exactly
        prop_assert_eq!(*starts.last().unwrap(), extent - window);
    }
}

#[test]
fn region_monotonicity_on_1000_random_volumes() {
    let mapping = RegionMapping::default();
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let n = r.gen_range(8..=64usize);
        let labels: Vec<u8> = (0..n).map(|_| [0u8, 1, 2, 4][r.gen_range(0..4)]).collect();
        let [et, tc, wt] = region_binarize(&labels, &mapping);
        for i in 0..n {
            assert!(!et[i] || tc[i], "seed {seed}: ET ⊄ TC at {i}");
            assert!(!tc[i] || wt[i], "seed {seed}: TC ⊄ WT at {i}");
        }
    }
}

#[test]
fn augmentation_tracks_marked_voxel_and_label_alphabet() {
    // A uniquely-marked voxel must carry its label through any augmentation
    // draw, and the label alphabet never changes.
    for seed in 0..50u64 {
        let mut r = rng(7000 + seed);
        let e = 12usize;
        let v = e * e * e;
        let mut sample = VolumeSample {
            case_id: format!("case{seed}"),
            modalities: (0..4 * v).map(|i| ((i % 5) + 1) as f32).collect(),
            channels: 4,
            extent: (e, e, e),
            label: Some((0..v).map(|i| [0u8, 1, 2, 4][i % 4]).collect()),
            spacing: (1.0, 1.0, 1.0),
        };
        // marker at the center so small crops keep it
        let center = (e / 2 * e + e / 2) * e + e / 2;
        sample.modality_mut(0)[center] = 777.0;
        sample.label.as_mut().unwrap()[center] = 4;

        let target = (8, 8, 8);
        let out = augment(&sample, target, &mut sample_rng(seed, "marked", 0));
        out.validate().unwrap();
        // intensity augmentation rescales the marker, but it stays the
        // unique maximum of modality 0
        let m0 = out.modality(0);
        let (pos, &max) = m0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if max > 500.0 {
            assert_eq!(
                out.label.as_ref().unwrap()[pos],
                4,
                "seed {seed}: marker voxel lost its label"
            );
        }
        let _ = r.gen::<u8>();
    }
}
