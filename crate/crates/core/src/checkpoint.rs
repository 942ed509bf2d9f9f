//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPZM" | u32 version | u64 metadata length | JSON metadata
//!        | f32 tensor payloads, concatenated | u32 CRC-32 of the payload
//! ```
//!
//! The metadata carries the model kind, the architecture, training seed and
//! epoch count, and a tensor directory of `{name, shape, offset}` where
//! `offset` is the byte offset into the payload.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::mil::{Aggregation, TargetModel};
use crate::model::{Architecture, SourceModel};
use crate::tensor::{Parameter, Tensor};

pub const MAGIC: [u8; 4] = *b"SPZM";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    model_kind: ModelKind,
    architecture: Architecture,
    aggregation: Option<Aggregation>,
    attention_dim: Option<usize>,
    seed: u64,
    epochs: usize,
    best_epoch: Option<usize>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A model's parameters at 32-bit precision plus what is needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub architecture: Architecture,
    /// Target checkpoints only.
    pub aggregation: Option<Aggregation>,
    /// Target checkpoints only.
    pub attention_dim: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    /// Epoch (1-based) whose weights were retained, if chosen on validation.
    pub best_epoch: Option<usize>,
    pub tensors: Vec<NamedTensor>,
}

fn snapshot<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Vec<NamedTensor> {
    params
        .into_iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            data: p.data().iter().map(|&v| v as f32).collect(),
        })
        .collect()
}

/// Copies checkpoint tensors into `params` by name. Every mismatch (missing,
/// unexpected, or wrongly shaped tensor) is listed in one config error.
pub fn restore_params<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    tensors: &[NamedTensor],
) -> Result<()> {
    let by_name: BTreeMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut used = HashSet::new();
    let mut problems = Vec::new();
    let mut assignments = Vec::new();
    for p in params {
        match by_name.get(p.name.as_str()) {
            None => problems.push(format!("{} missing from checkpoint", p.name)),
            Some(t) if t.shape != p.shape() => {
                used.insert(t.name.as_str());
                problems.push(format!("{} has shape {:?}, model expects {:?}", p.name, t.shape, p.shape()))
            }
            Some(t) => {
                used.insert(t.name.as_str());
                assignments.push((p, *t));
            }
        }
    }
    for name in by_name.keys() {
        if !used.contains(name) {
            problems.push(format!("{name} not in model"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::config(format!("incompatible checkpoint: {}", problems.join("; "))));
    }
    for (p, t) in assignments {
        let data: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
        p.tensor = Tensor::new(&t.shape, data)?.with_requires_grad(true);
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_source(model: &SourceModel, seed: u64, epochs: usize, best_epoch: Option<usize>) -> Self {
        Checkpoint {
            model_kind: ModelKind::Source,
            architecture: model.architecture(),
            aggregation: None,
            attention_dim: None,
            seed,
            epochs,
            best_epoch,
            tensors: snapshot(model.params()),
        }
    }

    pub fn from_target(model: &TargetModel, seed: u64, epochs: usize, best_epoch: Option<usize>) -> Self {
        Checkpoint {
            model_kind: ModelKind::Target,
            architecture: model.architecture(),
            aggregation: Some(model.mode),
            attention_dim: Some(model.aggregator.attention_dim()),
            seed,
            epochs,
            best_epoch,
            tensors: snapshot(model.params()),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_kind != kind {
            return Err(Error::config(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.model_kind
            )));
        }
        Ok(())
    }

    /// Rebuilds the source model. The throwaway init only fixes shapes.
    pub fn to_source(&self) -> Result<SourceModel> {
        self.expect_kind(ModelKind::Source)?;
        let mut model = SourceModel::init(&self.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_params(model.params_mut(), &self.tensors)?;
        Ok(model)
    }

    pub fn to_target(&self) -> Result<TargetModel> {
        self.expect_kind(ModelKind::Target)?;
        let mode = self
            .aggregation
            .ok_or_else(|| Error::config("target checkpoint without aggregation mode"))?;
        let dim = self
            .attention_dim
            .ok_or_else(|| Error::config("target checkpoint without attention dimension"))?;
        let mut model = TargetModel::init(&self.architecture, mode, dim, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_params(model.params_mut(), &self.tensors)?;
        Ok(model)
    }

    /// Checks the checkpoint against an architecture given elsewhere (flags, config).
    pub fn check_architecture(&self, expected: &Architecture) -> Result<()> {
        // Block freezing is a training choice, not part of the weights.
        let mut own_arch = self.architecture.clone();
        own_arch.backbone.frozen_blocks = expected.backbone.frozen_blocks;
        if &own_arch == expected {
            return Ok(());
        }
        let mut model = SourceModel::init(expected, &mut ChaCha8Rng::seed_from_u64(0))?;
        let own: Vec<NamedTensor> = match self.model_kind {
            ModelKind::Source => self.tensors.clone(),
            // Only the shared backbone and head matter here.
            ModelKind::Target => self
                .tensors
                .iter()
                .filter(|t| !t.name.starts_with("aggregator.") && !t.name.starts_with("bag_classifier."))
                .cloned()
                .collect(),
        };
        let shared: Vec<&mut Parameter> = model
            .params_mut()
            .into_iter()
            .filter(|p| self.model_kind == ModelKind::Source || !p.name.starts_with("classifier."))
            .collect();
        restore_params(shared, &own)?;
        Err(Error::config(format!(
            "checkpoint architecture {} differs from requested {}",
            serde_json::to_string(&self.architecture)?,
            serde_json::to_string(expected)?
        )))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = HashSet::new();
        let mut directory = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::contract(format!("duplicate tensor name '{}'", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::dim("save_checkpoint", format!("tensor '{}' shape/data mismatch", t.name)));
            }
            directory.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.data.len() as u64;
        }
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            model_kind: self.model_kind,
            architecture: self.architecture.clone(),
            aggregation: self.aggregation,
            attention_dim: self.attention_dim,
            seed: self.seed,
            epochs: self.epochs,
            best_epoch: self.best_epoch,
            tensors: directory,
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + offset as usize + 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let payload_start = out.len();
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decodes a checkpoint. Nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                max_supported: FORMAT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let meta_end = (HEADER_LEN as u64)
            .checked_add(meta_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| CheckpointError::Truncated(format!("metadata of {meta_len} bytes runs past end of file")))?
            as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if meta.format_version != version {
            return Err(CheckpointError::Malformed(format!(
                "header version {version} but metadata says {}",
                meta.format_version
            )));
        }

        let mut expected_offset = 0u64;
        let mut names = HashSet::new();
        for e in &meta.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(CheckpointError::Malformed(format!("duplicate tensor name '{}'", e.name)));
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::Malformed(format!(
                    "tensor '{}' at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor '{}' shape overflows", e.name)))?;
            expected_offset += 4 * count;
        }
        let payload_len = expected_offset;
        let available = (bytes.len() - meta_end) as u64;
        if available < payload_len + 4 {
            return Err(CheckpointError::Truncated(format!(
                "payload needs {} bytes plus checksum, file has {available}",
                payload_len
            )));
        }
        if available > payload_len + 4 {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after checksum",
                available - payload_len - 4
            )));
        }
        let payload = &bytes[meta_end..meta_end + payload_len as usize];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }

        let tensors = meta
            .tensors
            .iter()
            .map(|e| {
                let start = e.offset as usize;
                let n: usize = e.shape.iter().product();
                let data = payload[start..start + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                NamedTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data,
                }
            })
            .collect();
        Ok(Checkpoint {
            model_kind: meta.model_kind,
            architecture: meta.architecture,
            aggregation: meta.aggregation,
            attention_dim: meta.attention_dim,
            seed: meta.seed,
            epochs: meta.epochs,
            best_epoch: meta.best_epoch,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
