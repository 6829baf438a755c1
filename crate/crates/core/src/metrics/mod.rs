//! Evaluation protocol: region composition from raw labels, per-case Dice
//! and 95% Hausdorff reports, and report emission (CSV per case, JSON
//! summary of means).

pub mod dice;
pub mod hausdorff;

use std::collections::BTreeSet;

use serde::Serialize;

use crate::tensor::{Result, TensorError};

pub use dice::{dice_score, softmax_dice_loss, DICE_EPS};
pub use hausdorff::{boundary_voxels, hausdorff95, nearest_rank_percentile, Extent, Hd95, Spacing};

/// Map raw labels {0, 1, 2, 4} to dense class indices {0, 1, 2, 3};
/// anything else is rejected.
pub(crate) fn remap_labels(labels: &[u8], num_classes: usize) -> Result<Vec<u8>> {
    labels
        .iter()
        .map(|&l| {
            let class = match l {
                0 => 0u8,
                1 => 1,
                2 => 2,
                4 => 3,
                other => {
                    return Err(TensorError::Domain {
                        op: "remap_labels",
                        what: format!("label {other} outside alphabet {{0, 1, 2, 4}}"),
                    })
                }
            };
            if (class as usize) < num_classes {
                Ok(class)
            } else {
                Err(TensorError::Domain {
                    op: "remap_labels",
                    what: format!("label {l} maps to class {class} >= {num_classes}"),
                })
            }
        })
        .collect()
}

/// Inverse of [`remap_labels`]: dense class indices back to the raw alphabet.
pub fn class_to_label(class: usize) -> u8 {
    [0u8, 1, 2, 4][class]
}

/// Evaluation regions as label sets. The defaults follow the nested
/// convention: enhancing tumor {4}, tumor core {1, 4}, whole tumor {1, 2, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMapping {
    pub et: BTreeSet<u8>,
    pub tc: BTreeSet<u8>,
    pub wt: BTreeSet<u8>,
}

impl Default for RegionMapping {
    fn default() -> Self {
        RegionMapping {
            et: BTreeSet::from([4]),
            tc: BTreeSet::from([1, 4]),
            wt: BTreeSet::from([1, 2, 4]),
        }
    }
}

impl RegionMapping {
    /// Enforce the nesting invariant ET ⊆ TC ⊆ WT.
    pub fn validate(&self) -> Result<()> {
        if !self.et.is_subset(&self.tc) || !self.tc.is_subset(&self.wt) {
            return Err(TensorError::Contract(format!(
                "region mapping must nest: ET {:?} ⊆ TC {:?} ⊆ WT {:?}",
                self.et, self.tc, self.wt
            )));
        }
        Ok(())
    }

    /// Parse overrides like `ET=1` or `ET=4;TC=1,4;WT=1,2,4` on top of the
    /// defaults.
    pub fn parse_overrides(text: &str) -> Result<Self> {
        let mut mapping = RegionMapping::default();
        for part in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, values) = part.split_once('=').ok_or_else(|| {
                TensorError::Contract(format!("bad mapping segment `{part}` (expected NAME=l1,l2)"))
            })?;
            let set: BTreeSet<u8> = values
                .split(',')
                .map(|v| {
                    v.trim().parse::<u8>().map_err(|e| {
                        TensorError::Contract(format!("bad label in mapping `{part}`: {e}"))
                    })
                })
                .collect::<Result<_>>()?;
            match name.trim().to_ascii_uppercase().as_str() {
                "ET" => mapping.et = set,
                "TC" => mapping.tc = set,
                "WT" => mapping.wt = set,
                other => {
                    return Err(TensorError::Contract(format!(
                        "unknown region `{other}` in mapping"
                    )))
                }
            }
        }
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn describe(&self) -> String {
        let fmt = |s: &BTreeSet<u8>| {
            s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        format!("ET={};TC={};WT={}", fmt(&self.et), fmt(&self.tc), fmt(&self.wt))
    }
}

/// Binary masks for (ET, TC, WT): a voxel joins a region iff its label is in
/// the region's set.
pub fn region_binarize(labels: &[u8], mapping: &RegionMapping) -> [Vec<bool>; 3] {
    let make = |set: &BTreeSet<u8>| labels.iter().map(|l| set.contains(l)).collect::<Vec<bool>>();
    [make(&mapping.et), make(&mapping.tc), make(&mapping.wt)]
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RegionMetrics {
    pub dice: f64,
    pub hd95: f64,
    /// Prediction and ground-truth masks were both empty (dice 1, hd95 0 by
    /// convention).
    pub both_empty: bool,
    /// Exactly one mask was empty (dice 0, sentinel hd95).
    pub one_empty: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub case_id: String,
    pub et: RegionMetrics,
    pub tc: RegionMetrics,
    pub wt: RegionMetrics,
}

impl CaseReport {
    pub fn regions(&self) -> [(&'static str, &RegionMetrics); 3] {
        [("et", &self.et), ("tc", &self.tc), ("wt", &self.wt)]
    }
}

/// Per-region Dice and HD95 for one case.
pub fn evaluate_case(
    case_id: &str,
    pred: &[u8],
    gt: &[u8],
    mapping: &RegionMapping,
    extent: Extent,
    spacing: Spacing,
) -> Result<CaseReport> {
    if pred.len() != gt.len() || pred.len() != extent.0 * extent.1 * extent.2 {
        return Err(TensorError::ShapeMismatch {
            op: "evaluate_case",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    mapping.validate()?;
    let pred_masks = region_binarize(pred, mapping);
    let gt_masks = region_binarize(gt, mapping);
    let mut metrics = Vec::with_capacity(3);
    for (p, g) in pred_masks.iter().zip(&gt_masks) {
        let p_empty = !p.iter().any(|&v| v);
        let g_empty = !g.iter().any(|&v| v);
        let dice = dice_score(p, g)?;
        let hd = hausdorff95(p, g, extent, spacing)?;
        metrics.push(RegionMetrics {
            dice,
            hd95: hd.value,
            both_empty: p_empty && g_empty,
            one_empty: p_empty != g_empty,
        });
    }
    Ok(CaseReport {
        case_id: case_id.to_string(),
        et: metrics[0],
        tc: metrics[1],
        wt: metrics[2],
    })
}

pub const REPORT_CSV_HEADER: &str =
    "case_id,dice_et,dice_wt,dice_tc,hd95_et,hd95_wt,hd95_tc,flags";

/// One CSV row per case.
pub fn report_csv_row(r: &CaseReport) -> String {
    let mut flags = Vec::new();
    for (name, m) in r.regions() {
        if m.both_empty {
            flags.push(format!("{name}_both_empty"));
        }
        if m.one_empty {
            flags.push(format!("{name}_one_empty"));
        }
    }
    format!(
        "{},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{}",
        r.case_id,
        r.et.dice,
        r.wt.dice,
        r.tc.dice,
        r.et.hd95,
        r.wt.hd95,
        r.tc.hd95,
        flags.join("|")
    )
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub cases: usize,
    pub mapping: String,
    pub mean_dice_et: f64,
    pub mean_dice_wt: f64,
    pub mean_dice_tc: f64,
    pub mean_hd95_et: f64,
    pub mean_hd95_wt: f64,
    pub mean_hd95_tc: f64,
}

/// Arithmetic means over cases.
pub fn summarize(reports: &[CaseReport], mapping: &RegionMapping) -> Summary {
    let n = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&CaseReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Summary {
        cases: reports.len(),
        mapping: mapping.describe(),
        mean_dice_et: mean(&|r| r.et.dice),
        mean_dice_wt: mean(&|r| r.wt.dice),
        mean_dice_tc: mean(&|r| r.tc.dice),
        mean_hd95_et: mean(&|r| r.et.hd95),
        mean_hd95_wt: mean(&|r| r.wt.hd95),
        mean_hd95_tc: mean(&|r| r.tc.hd95),
    }
}
