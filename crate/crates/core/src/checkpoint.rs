//! Single-file checkpoints: magic, manifest length, JSON manifest, then raw
//! little-endian `f64` blobs (parameters in manifest order, followed by the
//! Adam moments when optimizer state is present).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{HpdtError, Result};
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::optim::{AdamHyper, AdamState};
use crate::tensor::NdTensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"HPDTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Progress needed to resume training bit-identically.
///
/// Every random draw of training is a pure function of `(config.seed, update, task, row)`,
/// so the update counter stands in for serialized generator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub updates_done: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub train_state: Option<TrainState>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    hyper: AdamHyper,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    version: String,
    mode: Mode,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
    train_state: Option<TrainState>,
    metadata: serde_json::Value,
}

impl ModelCheckpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Self {
            config,
            params,
            optimizer: None,
            train_state: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.params.store;
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            version: crate::version_string(),
            mode: self.config.mode,
            config: self.config.clone(),
            params: store
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                hyper: o.hyper,
                step: o.step,
            }),
            train_state: self.train_state.clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.scalar_count() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &NdTensor| t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        store.iter().for_each(|p| put(&p.value));
        if let Some(o) = &self.optimizer {
            o.first.iter().for_each(&mut put);
            o.second.iter().for_each(&mut put);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| HpdtError::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("manifest is truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(HpdtError::UnsupportedVersion {
                found: manifest.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if manifest.mode != manifest.config.mode {
            return Err(bad(format!(
                "manifest mode {} disagrees with config mode {}",
                manifest.mode, manifest.config.mode
            )));
        }
        let mut cursor = &bytes[16 + len..];
        let mut take = |shape: &[usize], what: &str| -> Result<NdTensor> {
            let n: usize = shape.iter().product();
            if cursor.len() < 8 * n {
                return Err(bad(format!("blob for {what} is truncated")));
            }
            let (head, rest) = cursor.split_at(8 * n);
            cursor = rest;
            let data = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            NdTensor::new(shape.to_vec(), data)
        };
        let mut store = ParamStore::new();
        for p in &manifest.params {
            let value = take(&p.shape, &p.name)?;
            store.add(p.name.clone(), value)?;
        }
        let optimizer = match &manifest.optimizer {
            Some(o) => {
                let mut first = Vec::with_capacity(manifest.params.len());
                let mut second = Vec::with_capacity(manifest.params.len());
                for p in &manifest.params {
                    first.push(take(&p.shape, &format!("{} (first moment)", p.name))?);
                }
                for p in &manifest.params {
                    second.push(take(&p.shape, &format!("{} (second moment)", p.name))?);
                }
                Some(AdamState {
                    hyper: o.hyper,
                    step: o.step,
                    first,
                    second,
                })
            }
            None => None,
        };
        if !cursor.is_empty() {
            return Err(bad(format!("{} trailing bytes after the last blob", cursor.len())));
        }
        let params = ModelParams::bind(&manifest.config, store)?;
        Ok(Self {
            config: manifest.config,
            params,
            optimizer,
            train_state: manifest.train_state,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored mode is the expected one.
    pub fn load_expecting(path: &Path, mode: Mode) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.config.mode != mode {
            return Err(HpdtError::ModeMismatch {
                expected: mode.to_string(),
                found: ckpt.config.mode.to_string(),
            });
        }
        Ok(ckpt)
    }
}

/// FNV-1a digest over every parameter's name, shape and value bits.
pub fn params_digest(store: &ParamStore) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for p in store.iter() {
        eat(p.name.as_bytes());
        p.value.shape().iter().for_each(|&d| eat(&(d as u64).to_le_bytes()));
        p.value.data().iter().for_each(|v| eat(&v.to_bits().to_le_bytes()));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            n_layers: 1,
            context_len: 4,
            demo_len: 4,
            k: 2,
            max_timestep: 16,
            mode,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let cfg = tiny(Mode::Full);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut ckpt = ModelCheckpoint::new(cfg, params);
        let mut opt = AdamState::new(&ckpt.params.store, AdamHyper::default());
        opt.step = 7;
        opt.first[0].data_mut()[0] = 0.25;
        ckpt.optimizer = Some(opt);
        let a = ckpt.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn truncation_names_the_parameter() {
        let cfg = tiny(Mode::WoG);
        let ckpt = ModelCheckpoint::new(cfg.clone(), ModelParams::init(&cfg, 0).unwrap());
        let bytes = ckpt.to_bytes().unwrap();
        let err = ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().contains("head.bias"), "{err}");
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wo_t.ckpt");
        let cfg = tiny(Mode::WoT);
        ModelCheckpoint::new(cfg.clone(), ModelParams::init(&cfg, 0).unwrap())
            .save(&path)
            .unwrap();
        let err = ModelCheckpoint::load_expecting(&path, Mode::Full).unwrap_err();
        assert!(matches!(err, HpdtError::ModeMismatch { .. }));
    }
}
