//! Binary checkpoint container.
//!
//! Layout: `b"APIC"`, a version byte, the header length as a little-endian
//! `u64`, a UTF-8 JSON header, then every array as little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"APIC";
pub const CHECKPOINT_VERSION: u8 = 1;
const PREFIX_LEN: usize = 4 + 1 + 8;
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Adam,
    /// Completed optimiser steps.
    pub iteration: usize,
    pub train_config: Option<TrainConfig>,
}

/// Training episodes are pure functions of `(seed, index)`, so this pair is
/// the whole random state of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    episodes_drawn: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    iteration: usize,
    rng_state: Option<RngState>,
    adam_step: u64,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: &Adam, iteration: usize, cfg: &TrainConfig) -> Self {
        Checkpoint {
            model: model.clone(),
            adam: adam.clone(),
            iteration,
            train_config: Some(cfg.clone()),
        }
    }

    /// A checkpoint of untrained parameters.
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            model: model.clone(),
            adam: Adam::new(&model.params),
            iteration: 0,
            train_config: None,
        }
    }

    fn arrays(&self) -> impl Iterator<Item = (String, &Tensor)> {
        let p = self.model.params.iter().map(|(n, t)| (n.clone(), t));
        let m = self.adam.m.iter().map(|(n, t)| (format!("{MOMENT1}{n}"), t));
        let v = self.adam.v.iter().map(|(n, t)| (format!("{MOMENT2}{n}"), t));
        p.chain(m).chain(v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        for (name, t) in self.arrays() {
            entries.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let header = Header {
            model_config: self.model.config.clone(),
            rng_state: self.train_config.as_ref().map(|c| RngState {
                seed: c.seed,
                episodes_drawn: (self.iteration * c.batch_size) as u64,
            }),
            train_config: self.train_config.clone(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Parses a checkpoint; `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint(origin.to_path_buf()));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(Error::Truncated(origin.display().to_string()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: bytes[4],
            });
        }
        let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let blob_start = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated(origin.display().to_string()))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..blob_start])?;
        let blob = &bytes[blob_start..];
        header.model_config.validate()?;

        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (name, shape) in header.model_config.parameter_shapes() {
            expected.insert(format!("{MOMENT1}{name}"), shape.clone());
            expected.insert(format!("{MOMENT2}{name}"), shape.clone());
            expected.insert(name, shape);
        }
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for entry in &header.arrays {
            let want = expected.remove(&entry.name).ok_or_else(|| Error::ShapeMismatch {
                name: entry.name.clone(),
                expected: vec![],
                found: entry.shape.clone(),
            })?;
            if want != entry.shape {
                return Err(Error::ShapeMismatch {
                    name: entry.name.clone(),
                    expected: want,
                    found: entry.shape.clone(),
                });
            }
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * len;
            if end > blob.len() {
                return Err(Error::Truncated(origin.display().to_string()));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(entry.shape.clone(), data);
            if let Some(n) = entry.name.strip_prefix(MOMENT1) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = entry.name.strip_prefix(MOMENT2) {
                v.insert(n.to_string(), t);
            } else {
                params.insert(entry.name.clone(), t);
            }
        }
        if let Some((name, shape)) = expected.into_iter().next() {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: vec![],
            });
        }
        let mut adam = Adam::new(&ParameterSet::from_arrays(BTreeMap::new()));
        adam.step = header.adam_step;
        adam.m = ParameterSet::from_arrays(m);
        adam.v = ParameterSet::from_arrays(v);
        Ok(Checkpoint {
            model: Model::new(header.model_config, ParameterSet::from_arrays(params))?,
            adam,
            iteration: header.iteration,
            train_config: header.train_config,
        })
    }

    /// Checks that the stored arrays fit `requested`, naming the first array
    /// that does not.
    pub fn check_config(&self, requested: &ModelConfig) -> Result<()> {
        requested.validate()?;
        self.model.params.check_layout(requested)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
