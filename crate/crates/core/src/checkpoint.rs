//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SADJCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then the
//! tensor payload. Each manifest tensor entry names its shape and the byte
//! offset and length of its data within the payload; data are little-endian
//! `f32`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjustmap::ClassWeightState;
use crate::config::TrainConfig;
use crate::model::Model;
use crate::nn::Parameterized;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SADJCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    config: Option<TrainConfig>,
    class_weights: Option<ClassWeightState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub class_weights: Option<ClassWeightState>,
    pub tensors: Vec<NamedTensor>,
}

fn tensors_of(model: &impl Parameterized) -> Vec<NamedTensor> {
    model
        .params()
        .into_iter()
        .map(|p| NamedTensor {
            name: p.name,
            shape: p.shape,
            data: p.data.iter().map(|&v| v as f32).collect(),
        })
        .collect()
}

impl ModelCheckpoint {
    /// Snapshot of `model`; parameters are stored at 32-bit precision.
    pub fn from_model(model: &Model, config: &TrainConfig, class_weights: Option<ClassWeightState>, step: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            step,
            config: config.clone(),
            class_weights,
            tensors: tensors_of(model),
        }
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::zero_initialized(self.config.model_config())?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies every stored tensor into `model`; names and shapes must match exactly.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape != p.shape {
                return Err(Error::Shape(format!(
                    "tensor {}: checkpoint shape {:?}, model expects {:?}",
                    p.name, t.shape, p.shape
                )));
            }
        }
        for p in params {
            let t = by_name[p.name.as_str()];
            for (d, &s) in p.data.iter_mut().zip(&t.data) {
                *d = s as f64;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(
            self.step,
            Some(&self.config),
            self.class_weights.as_ref(),
            &self.tensors,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, tensors) = decode(bytes)?;
        let config = manifest
            .config
            .ok_or_else(|| Error::Checkpoint("manifest has no training configuration".into()))?;
        Ok(Self {
            format_version: manifest.format_version,
            step: manifest.step,
            config,
            class_weights: manifest.class_weights,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

pub fn save_checkpoint(checkpoint: &ModelCheckpoint, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(path)
}

fn encode(
    step: u64,
    config: Option<&TrainConfig>,
    class_weights: Option<&ClassWeightState>,
    tensors: &[NamedTensor],
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        let length = 4 * t.data.len() as u64;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        config: config.cloned(),
        class_weights: class_weights.cloned(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<NamedTensor>)> {
    let truncated = || Error::Checkpoint("file is truncated".into());
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(truncated)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes.get(12..20).ok_or_else(truncated)?.try_into().expect("8 bytes"));
    let manifest_end = 20usize.checked_add(len as usize).ok_or_else(truncated)?;
    let manifest: Manifest = serde_json::from_slice(bytes.get(20..manifest_end).ok_or_else(truncated)?)?;
    if manifest.format_version != version {
        return Err(Error::CheckpointVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &bytes[manifest_end..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        if entry.length != 4 * count as u64 {
            return Err(Error::Checkpoint(format!(
                "tensor {} declares {} bytes for shape {:?}",
                entry.name, entry.length, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let data = payload
            .get(start..start + entry.length as usize)
            .ok_or_else(truncated)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    Ok((manifest, tensors))
}

/// Writes a bare tensor container (no training configuration), e.g. a set
/// of pretrained `backbone.*` weights.
pub fn write_tensor_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(0, None, None, tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Every tensor of a container file, keyed by name, as `(shape, values)`.
pub fn read_tensor_file(path: &Path) -> Result<HashMap<String, (Vec<usize>, Vec<f64>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, tensors) = decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(tensors
        .into_iter()
        .map(|t| (t.name, (t.shape, t.data.into_iter().map(f64::from).collect())))
        .collect())
}

/// `backbone.*` tensors of `model`, in the naming read by pretrained loading.
pub fn backbone_tensors(model: &Model) -> Vec<NamedTensor> {
    tensors_of(&model.features.backbone)
        .into_iter()
        .map(|t| NamedTensor {
            name: format!("backbone.{}", t.name),
            ..t
        })
        .collect()
}
