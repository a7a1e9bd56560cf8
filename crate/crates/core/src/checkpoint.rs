//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "GRNDCKPT"
//! u32       format version (1)
//! u64       header length H
//! H bytes   JSON header
//! f64 ...   tensor data
//! ```
//!
//! The header holds the model config, the run config and its SHA-256 hash,
//! the epoch metrics, the list of tensors (`name`, `shape`) in storage order
//! and, when present, the Adam step count and settings. The data section is
//! every model tensor in that order, followed by Adam's first moments and then
//! its second moments for the same tensors. Values are stored as raw bits, so
//! loading gives back exactly what was saved.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::optim::{AdamConfig, AdamState, EpochMetrics};

pub const MAGIC: &[u8; 8] = b"GRNDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    config: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    run_config: serde_json::Value,
    config_hash: String,
    best_epoch: usize,
    metrics: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
    adam: Option<AdamHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub adam: Option<AdamState>,
    /// The configuration the run was started with, as JSON.
    pub run_config: serde_json::Value,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.run_config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.model.tensors();
        let header = Header {
            model_config: self.model.config.clone(),
            run_config: self.run_config.clone(),
            config_hash: self.config_hash(),
            best_epoch: self.best_epoch,
            metrics: self.metrics.clone(),
            tensors: tensors
                .iter()
                .map(|(m, t)| TensorEntry {
                    name: m.name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                t: a.t,
                config: a.config,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        tensors.iter().for_each(|(_, t)| put(t));
        if let Some(a) = &self.adam {
            a.m.iter().chain(&a.v).for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("{}: {msg}", origin.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let h_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + h_len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.config_hash != config_hash(&header.run_config) {
            return Err(bad("config hash does not match the stored config".into()));
        }

        let mut model = ModelParams::new(header.model_config.clone(), 0)?;
        let layout: Vec<TensorEntry> = model
            .tensors()
            .iter()
            .map(|(m, t)| TensorEntry {
                name: m.name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        if layout != header.tensors {
            return Err(bad("tensor layout does not match the model config".into()));
        }

        let mut values = bytes[20 + h_len..].chunks_exact(8);
        if values.len() * 8 != bytes.len() - 20 - h_len {
            return Err(bad("data section is not a whole number of f64 values".into()));
        }
        let mut fill = |t: &mut Tensor| -> Result<()> {
            for x in t.data_mut() {
                let chunk = values.next().ok_or_else(|| bad("truncated tensor data".into()))?;
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            Ok(())
        };
        for (_, t) in model.tensors_mut() {
            fill(t)?;
        }
        let adam = match &header.adam {
            Some(h) => {
                let mut state = AdamState::new(&model, h.config);
                state.t = h.t;
                for t in state.m.iter_mut().chain(state.v.iter_mut()) {
                    fill(t)?;
                }
                Some(state)
            }
            None => None,
        };
        if values.next().is_some() {
            return Err(bad("trailing data after the last tensor".into()));
        }
        Ok(Checkpoint {
            model,
            adam,
            run_config: header.run_config,
            best_epoch: header.best_epoch,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
