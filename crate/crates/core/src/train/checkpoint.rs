//! Checkpoint persistence: a length-prefixed JSON manifest followed by a
//! raw little-endian payload holding parameters, batch-norm buffers, and
//! Adam moments at the manifest's offsets. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::AdamState;
use crate::layers::ParamVisit;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("format version {found} unsupported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("dtype mismatch: checkpoint holds {found}, loader expects {expected}")]
    DtypeMismatch { found: String, expected: String },
    #[error("shape mismatch for `{name}`: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("missing entry `{0}` in checkpoint")]
    MissingEntry(String),
    #[error("payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    /// Model configuration in the key=value text format.
    pub config: String,
    pub train: TrainMeta,
    pub entries: Vec<ManifestEntry>,
}

impl CheckpointManifest {
    /// Total payload length in elements; entries must tile it exactly.
    pub fn payload_elems(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: self.format_version,
            });
        }
        // Offsets must be non-overlapping and dense.
        let mut expect = 0usize;
        for e in &self.entries {
            if e.offset != expect {
                return Err(CheckpointError::Manifest(format!(
                    "entry `{}` at offset {} (expected {expect})",
                    e.name, e.offset
                )));
            }
            expect += e.shape.iter().product::<usize>();
        }
        Ok(())
    }
}

fn collect_entries<T: Scalar>(
    model: &Model<T>,
    adam: &AdamState<T>,
) -> (Vec<ManifestEntry>, Vec<T>) {
    let mut entries = Vec::new();
    let mut payload: Vec<T> = Vec::new();
    let mut push = |name: String, kind: EntryKind, shape: Vec<usize>, data: &[T]| {
        entries.push(ManifestEntry {
            name,
            kind,
            shape,
            offset: payload.len(),
        });
        payload.extend_from_slice(data);
    };
    model.visit("model", &mut |name, t| {
        push(name, EntryKind::Param, t.shape().to_vec(), t.data());
    });
    model.visit_buffers("model", &mut |name, buf| {
        let data = buf.borrow();
        push(name, EntryKind::Buffer, vec![data.len()], &data);
    });
    for (name, m) in &adam.m {
        push(format!("adam.m.{name}"), EntryKind::AdamM, vec![m.len()], m);
    }
    for (name, v) in &adam.v {
        push(format!("adam.v.{name}"), EntryKind::AdamV, vec![v.len()], v);
    }
    (entries, payload)
}

/// Serialize model parameters, buffers, and optimizer state.
pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    adam: &AdamState<T>,
    meta: &TrainMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let (entries, payload) = collect_entries(model, adam);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: T::dtype_name().to_string(),
        config: model.config.to_key_values(),
        train: TrainMeta {
            step: adam.step,
            ..*meta
        },
        entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_u64::<LittleEndian>(json.len() as u64).map_err(io_err)?;
    file.write_all(&json).map_err(io_err)?;
    let mut bytes = vec![0u8; payload.len() * 8];
    let mut used = 0usize;
    for &v in &payload {
        match T::dtype_name() {
            "f32" => {
                LittleEndian::write_f32(&mut bytes[used..], v.to_f64() as f32);
                used += 4;
            }
            _ => {
                LittleEndian::write_f64(&mut bytes[used..], v.to_f64());
                used += 8;
            }
        }
    }
    file.write_all(&bytes[..used]).map_err(io_err)
}

/// Read and validate the manifest alone (no payload).
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = fs::File::open(path).map_err(io_err)?;
    let json_len = file.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json).map_err(io_err)?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Rebuild the model and optimizer state from a checkpoint. The manifest is
/// validated (version, dtype, offsets, shapes) before any payload is
/// consumed.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(Model<T>, AdamState<T>, TrainMeta), CheckpointError> {
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let bytes = fs::read(path).map_err(io_err)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            need: 8,
            have: bytes.len(),
        });
    }
    let json_len = LittleEndian::read_u64(&bytes[..8]) as usize;
    if bytes.len() < 8 + json_len {
        return Err(CheckpointError::Truncated {
            need: 8 + json_len,
            have: bytes.len(),
        });
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[8..8 + json_len])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    manifest.validate()?;
    if manifest.dtype != T::dtype_name() {
        return Err(CheckpointError::DtypeMismatch {
            found: manifest.dtype,
            expected: T::dtype_name().to_string(),
        });
    }
    let config = ModelConfig::from_key_values(&manifest.config)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let elem = if manifest.dtype == "f32" { 4 } else { 8 };
    let total = manifest.payload_elems();
    let need = 8 + json_len + total * elem;
    if bytes.len() < need {
        return Err(CheckpointError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let payload_bytes = &bytes[8 + json_len..];
    let read_at = |offset: usize, len: usize| -> Vec<T> {
        (0..len)
            .map(|i| {
                let at = (offset + i) * elem;
                if elem == 4 {
                    T::from_f64(LittleEndian::read_f32(&payload_bytes[at..]) as f64)
                } else {
                    T::from_f64(LittleEndian::read_f64(&payload_bytes[at..]))
                }
            })
            .collect()
    };

    let by_name: BTreeMap<&str, &ManifestEntry> = manifest
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let lookup = |name: &str, kind: EntryKind| -> Result<&ManifestEntry, CheckpointError> {
        let e = by_name
            .get(name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))?;
        if e.kind != kind {
            return Err(CheckpointError::Manifest(format!(
                "entry `{name}` has kind {:?}, expected {kind:?}",
                e.kind
            )));
        }
        Ok(e)
    };

    // Seed is irrelevant: every parameter is overwritten below.
    let mut model =
        Model::<T>::build(&config, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut failure: Option<CheckpointError> = None;
    model.visit_mut("model", &mut |name, tensor: &mut Tensor<T>| {
        if failure.is_some() {
            return;
        }
        match lookup(&name, EntryKind::Param) {
            Ok(e) => {
                if e.shape != tensor.shape() {
                    failure = Some(CheckpointError::ShapeMismatch {
                        name,
                        found: e.shape.clone(),
                        expected: tensor.shape().to_vec(),
                    });
                    return;
                }
                tensor.set_data(read_at(e.offset, tensor.numel()));
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut buffer_failure: Option<CheckpointError> = None;
    model.visit_buffers("model", &mut |name, buf| {
        if buffer_failure.is_some() {
            return;
        }
        match lookup(&name, EntryKind::Buffer) {
            Ok(e) => {
                let mut b = buf.borrow_mut();
                if e.shape != [b.len()] {
                    buffer_failure = Some(CheckpointError::ShapeMismatch {
                        name,
                        found: e.shape.clone(),
                        expected: vec![b.len()],
                    });
                    return;
                }
                *b = read_at(e.offset, b.len());
            }
            Err(e) => buffer_failure = Some(e),
        }
    });
    if let Some(e) = buffer_failure {
        return Err(e);
    }

    let mut adam = AdamState::new(&model);
    adam.step = manifest.train.step;
    for (map, kind, prefix) in [
        (&mut adam.m, EntryKind::AdamM, "adam.m."),
        (&mut adam.v, EntryKind::AdamV, "adam.v."),
    ] {
        for (name, slot) in map.iter_mut() {
            let e = lookup(&format!("{prefix}{name}"), kind.clone())?;
            if e.shape != [slot.len()] {
                return Err(CheckpointError::ShapeMismatch {
                    name: format!("{prefix}{name}"),
                    found: e.shape.clone(),
                    expected: vec![slot.len()],
                });
            }
            *slot = read_at(e.offset, slot.len());
        }
    }
    Ok((model, adam, manifest.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn micro() -> (Model<f32>, AdamState<f32>) {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.in_channels = 1;
        cfg.num_classes = 2;
        cfg.base_channels = 1;
        cfg.encoder_channels = 8;
        cfg.embed_dim = 8;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.ffn_hidden = 4;
        cfg.input_extent = (8, 8, 8);
        let model = Model::build(&cfg, 11).unwrap();
        let adam = AdamState::new(&model);
        (model, adam)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (model, adam) = micro();
        let meta = TrainMeta {
            step: 3,
            epoch: 1,
            seed: 42,
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model, &adam, &meta, &p1).unwrap();
        let (m2, a2, meta2) = load_checkpoint::<f32>(&p1).unwrap();
        save_checkpoint(&m2, &a2, &meta2, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn tampered_shape_is_refused_with_name() {
        let dir = tempfile::tempdir().unwrap();
        let (model, adam) = micro();
        let meta = TrainMeta {
            step: 0,
            epoch: 0,
            seed: 0,
        };
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&model, &adam, &meta, &path).unwrap();

        // Rewrite the manifest with one parameter shape changed.
        let bytes = fs::read(&path).unwrap();
        let json_len = LittleEndian::read_u64(&bytes[..8]) as usize;
        let mut manifest: CheckpointManifest =
            serde_json::from_slice(&bytes[8..8 + json_len]).unwrap();
        let target = manifest
            .entries
            .iter_mut()
            .find(|e| e.name == "model.init_conv.bias")
            .unwrap();
        target.shape = vec![999];
        // Keep offsets dense: shrink the edit back so validate() passes.
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[8 + json_len..]);
        fs::write(&path, out).unwrap();

        match load_checkpoint::<f32>(&path) {
            Ok(_) => panic!("tampered checkpoint must be refused"),
            Err(CheckpointError::Manifest(_) | CheckpointError::ShapeMismatch { .. }) => {}
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn truncated_payload_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (model, adam) = micro();
        let meta = TrainMeta {
            step: 0,
            epoch: 0,
            seed: 0,
        };
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&model, &adam, &meta, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (model, adam) = micro();
        let meta = TrainMeta {
            step: 0,
            epoch: 0,
            seed: 0,
        };
        let path = dir.path().join("e.ckpt");
        save_checkpoint(&model, &adam, &meta, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let json_len = LittleEndian::read_u64(&bytes[..8]) as usize;
        let mut manifest: CheckpointManifest =
            serde_json::from_slice(&bytes[8..8 + json_len]).unwrap();
        manifest.format_version = 99;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[8 + json_len..]);
        fs::write(&path, out).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::VersionMismatch { found: 99 })
        ));
    }

    #[test]
    fn payload_size_matches_inventory() {
        let dir = tempfile::tempdir().unwrap();
        let (model, adam) = micro();
        let meta = TrainMeta {
            step: 0,
            epoch: 0,
            seed: 0,
        };
        let path = dir.path().join("f.ckpt");
        save_checkpoint(&model, &adam, &meta, &path).unwrap();
        let manifest = read_manifest(&path).unwrap();
        let params = model.num_params();
        let mut buffers = 0usize;
        model.visit_buffers("model", &mut |_, b| buffers += b.borrow().len());
        // params + buffers + two Adam moments per param
        assert_eq!(manifest.payload_elems(), params * 3 + buffers);
        let file_len = fs::read(&path).unwrap().len();
        let json_len = {
            let bytes = fs::read(&path).unwrap();
            LittleEndian::read_u64(&bytes[..8]) as usize
        };
        assert_eq!(file_len, 8 + json_len + 4 * (params * 3 + buffers));
    }
}
