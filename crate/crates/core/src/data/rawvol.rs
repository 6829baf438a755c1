//! The native on-disk case format: one `manifest.json` per case directory
//! describing each flat little-endian `.rawvol` payload file.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{DataError, VolumeSample, MODALITY_NAMES};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub shape: [usize; 3],
    /// "f32" or "u8"
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub spacing: [f32; 3],
    pub files: std::collections::BTreeMap<String, FileEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write_payload_f32(path: &Path, data: &[f32]) -> Result<(), DataError> {
    let mut bytes = vec![0u8; data.len() * 4];
    LittleEndian::write_f32_into(data, &mut bytes);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

fn read_payload_f32(path: &Path, n: usize) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != n * 4 {
        return Err(DataError::Manifest {
            path: path.display().to_string(),
            what: format!("expected {} payload bytes, found {}", n * 4, bytes.len()),
        });
    }
    let mut out = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes, &mut out);
    Ok(out)
}

/// Write a full case (modalities and, when present, the label volume).
pub fn write_case(root: &Path, sample: &VolumeSample) -> Result<(), DataError> {
    sample.validate()?;
    let dir = root.join(&sample.case_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let shape = [sample.extent.0, sample.extent.1, sample.extent.2];
    let mut files = std::collections::BTreeMap::new();
    for (c, name) in MODALITY_NAMES.iter().take(sample.channels).enumerate() {
        let file = format!("{name}.rawvol");
        write_payload_f32(&dir.join(&file), sample.modality(c))?;
        files.insert(
            name.to_string(),
            FileEntry {
                path: file,
                shape,
                dtype: "f32".into(),
            },
        );
    }
    if let Some(label) = &sample.label {
        let file = "label.rawvol";
        fs::write(dir.join(file), label).map_err(io_err(&dir))?;
        files.insert(
            "label".into(),
            FileEntry {
                path: file.into(),
                shape,
                dtype: "u8".into(),
            },
        );
    }
    let manifest = CaseManifest {
        case_id: sample.case_id.clone(),
        spacing: [sample.spacing.0, sample.spacing.1, sample.spacing.2],
        files,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn read_manifest(case_dir: &Path) -> Result<CaseManifest, DataError> {
    let path = case_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: path.display().to_string(),
        what: e.to_string(),
    })
}

/// Load a full case; all four modalities must be present, the label is
/// optional.
pub fn read_case(case_dir: &Path) -> Result<VolumeSample, DataError> {
    let manifest = read_manifest(case_dir)?;
    let first = manifest.files.values().next().ok_or_else(|| DataError::Manifest {
        path: case_dir.display().to_string(),
        what: "manifest lists no files".into(),
    })?;
    let shape = first.shape;
    let voxels = shape[0] * shape[1] * shape[2];
    let mut modalities = Vec::with_capacity(4 * voxels);
    for name in MODALITY_NAMES {
        let entry = manifest
            .files
            .get(name)
            .ok_or_else(|| DataError::MissingEntry {
                case_id: manifest.case_id.clone(),
                name: name.into(),
            })?;
        if entry.shape != shape {
            return Err(DataError::Shape {
                case_id: manifest.case_id.clone(),
                what: format!("{name} shape {:?} != {:?}", entry.shape, shape),
            });
        }
        modalities.extend(read_payload_f32(&case_dir.join(&entry.path), voxels)?);
    }
    let label = match manifest.files.get("label") {
        Some(entry) => {
            let path = case_dir.join(&entry.path);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.len() != voxels {
                return Err(DataError::Shape {
                    case_id: manifest.case_id.clone(),
                    what: format!("label has {} bytes, expected {voxels}", bytes.len()),
                });
            }
            Some(bytes)
        }
        None => None,
    };
    let sample = VolumeSample {
        case_id: manifest.case_id,
        modalities,
        channels: 4,
        extent: (shape[0], shape[1], shape[2]),
        label,
        spacing: (
            manifest.spacing[0],
            manifest.spacing[1],
            manifest.spacing[2],
        ),
    };
    sample.validate()?;
    Ok(sample)
}

/// Write a label-only case (predicted segmentations).
pub fn write_labels(
    root: &Path,
    case_id: &str,
    labels: &[u8],
    extent: (usize, usize, usize),
    spacing: (f32, f32, f32),
) -> Result<(), DataError> {
    let dir = root.join(case_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    fs::write(dir.join("label.rawvol"), labels).map_err(io_err(&dir))?;
    let mut files = std::collections::BTreeMap::new();
    files.insert(
        "label".to_string(),
        FileEntry {
            path: "label.rawvol".into(),
            shape: [extent.0, extent.1, extent.2],
            dtype: "u8".into(),
        },
    );
    let manifest = CaseManifest {
        case_id: case_id.into(),
        spacing: [spacing.0, spacing.1, spacing.2],
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(io_err(&path))
}

/// Load only the label volume of a case.
pub fn read_labels(case_dir: &Path) -> Result<(Vec<u8>, (usize, usize, usize), (f32, f32, f32)), DataError> {
    let manifest = read_manifest(case_dir)?;
    let entry = manifest
        .files
        .get("label")
        .ok_or_else(|| DataError::MissingEntry {
            case_id: manifest.case_id.clone(),
            name: "label".into(),
        })?;
    let path = case_dir.join(&entry.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let voxels = entry.shape[0] * entry.shape[1] * entry.shape[2];
    if bytes.len() != voxels {
        return Err(DataError::Shape {
            case_id: manifest.case_id,
            what: format!("label has {} bytes, expected {voxels}", bytes.len()),
        });
    }
    Ok((
        bytes,
        (entry.shape[0], entry.shape[1], entry.shape[2]),
        (
            manifest.spacing[0],
            manifest.spacing[1],
            manifest.spacing[2],
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VolumeSample {
        let v = 2 * 3 * 4;
        VolumeSample {
            case_id: "case_000".into(),
            modalities: (0..4 * v).map(|i| i as f32 * 0.25).collect(),
            channels: 4,
            extent: (2, 3, 4),
            label: Some((0..v).map(|i| [0u8, 1, 2, 4][i % 4]).collect()),
            spacing: (1.0, 1.0, 1.5),
        }
    }

    #[test]
    fn case_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        write_case(dir.path(), &s).unwrap();
        let back = read_case(&dir.path().join("case_000")).unwrap();
        assert_eq!(back.modalities, s.modalities);
        assert_eq!(back.label, s.label);
        assert_eq!(back.extent, s.extent);
        assert_eq!(back.spacing, s.spacing);
    }

    #[test]
    fn missing_modality_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        write_case(dir.path(), &s).unwrap();
        std::fs::remove_file(dir.path().join("case_000/t2.rawvol")).unwrap();
        let mut manifest = read_manifest(&dir.path().join("case_000")).unwrap();
        manifest.files.remove("t2");
        std::fs::write(
            dir.path().join("case_000/manifest.json"),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = read_case(&dir.path().join("case_000")).unwrap_err();
        assert!(matches!(err, DataError::MissingEntry { name, .. } if name == "t2"));
    }
}
