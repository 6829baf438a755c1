//! Volume ingestion, normalization, augmentation, and phantom generation.

pub mod augment;
pub mod nifti;
pub mod phantom;
pub mod rawvol;

use std::path::Path;

use thiserror::Error;

pub use nifti::{parse_nifti1, write_nifti1, Nifti1Header, NiftiError, NiftiPayload};

/// The raw label alphabet: background, necrotic/non-enhancing core,
/// peritumoral edema, enhancing tumor.
pub const LABEL_ALPHABET: [u8; 4] = [0, 1, 2, 4];

/// Fixed modality file order; defines the channel order of
/// [`VolumeSample::modalities`].
pub const MODALITY_NAMES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {what}")]
    Manifest { path: String, what: String },
    #[error("case `{case_id}` is missing file entry `{name}`")]
    MissingEntry { case_id: String, name: String },
    #[error("shape mismatch in case `{case_id}`: {what}")]
    Shape { case_id: String, what: String },
    #[error("label value {0} outside alphabet {{0, 1, 2, 4}}")]
    BadLabel(u8),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("phantom generation failed: {0}")]
    Phantom(String),
}

/// One case: stacked modality intensities, optional integer labels, and
/// voxel spacing. Buffers are row-major over `(x, y, z)` with the channel
/// outermost.
#[derive(Clone, Debug)]
pub struct VolumeSample {
    pub case_id: String,
    /// `channels * nx * ny * nz` intensities.
    pub modalities: Vec<f32>,
    pub channels: usize,
    pub extent: (usize, usize, usize),
    /// Per-voxel labels drawn from [`LABEL_ALPHABET`].
    pub label: Option<Vec<u8>>,
    /// Voxel spacing in mm.
    pub spacing: (f32, f32, f32),
}

impl VolumeSample {
    pub fn voxels(&self) -> usize {
        self.extent.0 * self.extent.1 * self.extent.2
    }

    pub fn modality(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.modalities[c * v..(c + 1) * v]
    }

    pub fn modality_mut(&mut self, c: usize) -> &mut [f32] {
        let v = self.voxels();
        &mut self.modalities[c * v..(c + 1) * v]
    }

    /// Validate buffer sizes and the label alphabet.
    pub fn validate(&self) -> Result<(), DataError> {
        let v = self.voxels();
        if self.modalities.len() != self.channels * v {
            return Err(DataError::Shape {
                case_id: self.case_id.clone(),
                what: format!(
                    "modalities has {} values, expected {} ({} channels x {v} voxels)",
                    self.modalities.len(),
                    self.channels * v,
                    self.channels
                ),
            });
        }
        if let Some(label) = &self.label {
            if label.len() != v {
                return Err(DataError::Shape {
                    case_id: self.case_id.clone(),
                    what: format!("label has {} values, expected {v}", label.len()),
                });
            }
            if let Some(&bad) = label.iter().find(|l| !LABEL_ALPHABET.contains(l)) {
                return Err(DataError::BadLabel(bad));
            }
        }
        Ok(())
    }
}

/// Load a case directory in either supported layout: the native
/// `manifest.json` + `.rawvol` format, or single-file NIfTI-1 volumes named
/// `t1.nii`, `t1ce.nii`, `t2.nii`, `flair.nii` (and optionally `label.nii`).
pub fn load_case_auto(case_dir: &Path) -> Result<VolumeSample, DataError> {
    if case_dir.join("manifest.json").is_file() {
        return rawvol::read_case(case_dir);
    }
    let case_id = case_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let mut modalities = Vec::new();
    let mut extent = None;
    let mut spacing = (1.0f32, 1.0, 1.0);
    for name in MODALITY_NAMES {
        let path = case_dir.join(format!("{name}.nii"));
        let bytes = std::fs::read(&path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let (header, tensor) = parse_nifti1(&bytes)?;
        let shape = tensor.shape();
        if shape.len() != 3 {
            return Err(DataError::Shape {
                case_id: case_id.clone(),
                what: format!("{name}.nii is {}-dimensional, expected 3", shape.len()),
            });
        }
        let this = (shape[0], shape[1], shape[2]);
        match extent {
            None => {
                extent = Some(this);
                spacing = header.spacing();
            }
            Some(e) if e != this => {
                return Err(DataError::Shape {
                    case_id: case_id.clone(),
                    what: format!("{name}.nii extent {this:?} differs from {e:?}"),
                })
            }
            _ => {}
        }
        modalities.extend_from_slice(tensor.data());
    }
    let extent = extent.expect("at least one modality read");
    let label_path = case_dir.join("label.nii");
    let label = if label_path.is_file() {
        let bytes = std::fs::read(&label_path).map_err(|e| DataError::Io {
            path: label_path.display().to_string(),
            source: e,
        })?;
        let (_, tensor) = parse_nifti1(&bytes)?;
        Some(
            tensor
                .data()
                .iter()
                .map(|&v| {
                    let l = v.round() as i64;
                    if (0..=255).contains(&l) && LABEL_ALPHABET.contains(&(l as u8)) {
                        Ok(l as u8)
                    } else {
                        Err(DataError::BadLabel(l.clamp(0, 255) as u8))
                    }
                })
                .collect::<Result<Vec<u8>, _>>()?,
        )
    } else {
        None
    };
    let sample = VolumeSample {
        case_id,
        modalities,
        channels: 4,
        extent,
        label,
        spacing,
    };
    sample.validate()?;
    Ok(sample)
}

/// Load just the labels of a case, from either layout.
pub fn load_labels_auto(
    case_dir: &Path,
) -> Result<(Vec<u8>, (usize, usize, usize), (f32, f32, f32)), DataError> {
    if case_dir.join("manifest.json").is_file() {
        return rawvol::read_labels(case_dir);
    }
    let sample = load_case_auto(case_dir)?;
    let label = sample.label.ok_or_else(|| DataError::MissingEntry {
        case_id: sample.case_id.clone(),
        name: "label".into(),
    })?;
    Ok((label, sample.extent, sample.spacing))
}

/// Case ids (subdirectories in either supported layout) under a dataset
/// root, sorted for deterministic iteration.
pub fn list_cases(root: &Path) -> Result<Vec<String>, DataError> {
    let read = |p: &Path| {
        p.read_dir().map_err(|e| DataError::Io {
            path: p.display().to_string(),
            source: e,
        })
    };
    let mut cases = Vec::new();
    for entry in read(root)? {
        let entry = entry.map_err(|e| DataError::Io {
            path: root.display().to_string(),
            source: e,
        })?;
        let path = entry.path();
        if path.is_dir()
            && (path.join("manifest.json").is_file() || path.join("t1.nii").is_file())
        {
            cases.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    cases.sort();
    Ok(cases)
}
