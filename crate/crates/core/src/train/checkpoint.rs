//! Single-file checkpoint: `FASTCKPT`, a u32 format version, a u64 manifest
//! length, the JSON manifest, then the raw little-endian tensor payload.
//! Every manifest entry names its byte range inside the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, AdamW, Moments};
use super::{Result, TrainError};
use crate::model::{Fastc, ModelConfig};
use crate::rng::derive_seed_str;

const MAGIC: &[u8; 8] = b"FASTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const FIRST: &str = "adam.m/";
const SECOND: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        Ok(match t.dtype() {
            DType::F64 => TensorData::F64(flat.to_vec1()?),
            _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
        })
    }

    fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(match self {
            TensorData::F32(v) => Tensor::from_slice(v, shape, &Device::Cpu)?,
            TensorData::F64(v) => Tensor::from_slice(v, shape, &Device::Cpu)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    config_hash: u64,
    model: ModelConfig,
    optimizer: Option<OptimizerState>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerState {
    cfg: AdamConfig,
    steps: u64,
}

/// Model parameters, normalization statistics and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: ModelConfig,
    pub config_hash: u64,
    optimizer: Option<OptimizerState>,
    pub tensors: Vec<NamedTensor>,
}

/// Stable hash of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    derive_seed_str(0, &serde_json::to_string(cfg).expect("config serializes"))
}

impl Checkpoint {
    pub fn capture(model: &Fastc, optimizer: Option<&AdamW>, step: u64) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut push = |prefix: &str, name: &str, t: &Tensor| -> Result<()> {
            tensors.push(NamedTensor {
                name: format!("{prefix}{name}"),
                shape: t.dims().to_vec(),
                data: TensorData::from_tensor(t)?,
            });
            Ok(())
        };
        for (name, v) in model.store.params() {
            push(PARAM, name, v.as_tensor())?;
        }
        for (name, v) in model.store.buffers() {
            push(BUFFER, name, v.as_tensor())?;
        }
        if let Some(opt) = optimizer {
            for (name, m) in &opt.moments {
                push(FIRST, name, &m.first)?;
                push(SECOND, name, &m.second)?;
            }
        }
        Ok(Self {
            step,
            model: model.cfg.clone(),
            config_hash: config_hash(&model.cfg),
            optimizer: optimizer.map(|o| OptimizerState {
                cfg: o.cfg,
                steps: o.steps,
            }),
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Model parameter and buffer values keyed by their store names.
    pub fn model_tensors(&self) -> impl Iterator<Item = (&str, &NamedTensor)> {
        self.tensors.iter().filter_map(|t| {
            t.name
                .strip_prefix(PARAM)
                .or_else(|| t.name.strip_prefix(BUFFER))
                .map(|n| (n, t))
        })
    }

    /// Writes every stored value into `model`. Model tensors absent from the
    /// checkpoint are an error unless their name starts with one of
    /// `may_be_missing`; nothing is written unless every check passes.
    pub fn restore(&self, model: &Fastc, may_be_missing: &[&str]) -> Result<()> {
        let stored: BTreeMap<&str, &NamedTensor> = self.model_tensors().collect();
        let mut writes = Vec::new();
        let expected = model.store.params().iter().chain(model.store.buffers());
        let mut known = 0;
        for (name, var) in expected {
            match stored.get(name.as_str()) {
                Some(t) => {
                    known += 1;
                    if t.shape != var.dims() {
                        return Err(TrainError::TensorShape {
                            name: name.clone(),
                            stored: t.shape.clone(),
                            expected: var.dims().to_vec(),
                        });
                    }
                    writes.push((name, t));
                }
                None if may_be_missing.iter().any(|p| name.starts_with(p)) => {}
                None => return Err(TrainError::MissingTensor(name.clone())),
            }
        }
        if known != stored.len() {
            let extra = stored
                .keys()
                .find(|n| model.store.get(n).is_none())
                .map(|n| n.to_string())
                .unwrap_or_default();
            return Err(TrainError::UnexpectedTensor(extra));
        }
        for (name, t) in writes {
            model.store.assign(name, &t.data.to_tensor(&t.shape)?)?;
        }
        Ok(())
    }

    /// Optimizer with the stored moments, if the checkpoint carries one.
    pub fn optimizer(&self) -> Result<Option<AdamW>> {
        let Some(state) = self.optimizer else {
            return Ok(None);
        };
        let mut opt = AdamW::new(state.cfg);
        opt.steps = state.steps;
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix(FIRST) {
                let second = self
                    .tensor(&format!("{SECOND}{name}"))
                    .ok_or_else(|| TrainError::MissingTensor(format!("{SECOND}{name}")))?;
                opt.moments.insert(
                    name.to_string(),
                    Moments {
                        first: t.data.to_tensor(&t.shape)?,
                        second: second.data.to_tensor(&second.shape)?,
                    },
                );
            }
        }
        Ok(Some(opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let offset = payload.len() as u64;
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
            entries.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.data.dtype_name().into(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            step: self.step,
            config_hash: self.config_hash,
            model: self.model.clone(),
            optimizer: self.optimizer,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| TrainError::Checkpoint(m);
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_end = 0u64;
        for e in &manifest.tensors {
            let elems: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(corrupt(format!("{}: unsupported dtype {other}", e.name))),
            };
            if e.bytes != (elems * width) as u64 || e.offset != expected_end {
                return Err(corrupt(format!("{}: inconsistent byte range", e.name)));
            }
            expected_end = e.offset + e.bytes;
            let range = e.offset as usize..expected_end as usize;
            let raw = payload
                .get(range)
                .ok_or_else(|| corrupt(format!("{}: payload truncated", e.name)))?;
            let data = if width == 4 {
                TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
            } else {
                TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
            };
            debug_assert_eq!(data.len(), elems);
            tensors.push(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        if expected_end != payload.len() as u64 {
            return Err(corrupt(format!(
                "payload is {} bytes, manifest describes {expected_end}",
                payload.len()
            )));
        }
        if manifest.config_hash != config_hash(&manifest.model) {
            return Err(corrupt("config hash does not match the stored model config".into()));
        }
        Ok(Self {
            step: manifest.step,
            model: manifest.model,
            config_hash: manifest.config_hash,
            optimizer: manifest.optimizer,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| TrainError::Io(path.to_path_buf(), e))?;
        }
        crate::tmap::write_atomic(path, &self.to_bytes()?).map_err(|e| TrainError::Io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TrainError::Io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model this checkpoint was captured from.
    pub fn build_model(&self) -> Result<Fastc> {
        let dtype = match self.tensors.first().map(|t| &t.data) {
            Some(TensorData::F64(_)) => DType::F64,
            _ => DType::F32,
        };
        let model = Fastc::new(self.model.clone(), 0, dtype)?;
        self.restore(&model, &[])?;
        Ok(model)
    }
}
