// SPDX-License-Identifier: Apache-2.0

//! `model.ckpt`: magic, one JSON header line, then little-endian f32
//! payloads in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{AnomalyModel, Mode, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LOGCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub config_hash: String,
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnomalyModel<f32>,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.model.config().clone(),
            config_hash: self.model.config().backbone_hash(),
            mode: self.model.mode(),
            seed: self.seed,
            step: self.step,
            params: self
                .model
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    group: p.group,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.model.params().total_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for p in self.model.params().iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::data("checkpoint: bad magic"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::data("checkpoint: missing header terminator"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..nl]).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
        if header.config_hash != header.config.backbone_hash() {
            return Err(Error::data("checkpoint: config hash does not match embedded config"));
        }
        let mut payload = &rest[nl + 1..];
        let mut store = ParamStore::new();
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(Error::data(format!("checkpoint: payload truncated at {}", e.name)));
            }
            let (chunk, tail) = payload.split_at(4 * n);
            payload = tail;
            let data: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
                return Err(Error::data(format!(
                    "checkpoint: non-finite value in {} at {pos}",
                    e.name
                )));
            }
            let i = store.push(e.name.clone(), e.group, Tensor::new(e.shape.clone(), data)?);
            store.get_mut(i).trainable = e.trainable;
        }
        if !payload.is_empty() {
            return Err(Error::data(format!("checkpoint: {} trailing bytes", payload.len())));
        }
        let model = AnomalyModel::from_parts(header.config, header.mode, store)?;
        Ok(Self {
            model,
            seed: header.seed,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 16,
            adapter_dim: 2,
            head_hidden: 4,
            seq_len: 5,
            dropout: 0.1,
        }
    }

    #[test]
    fn round_trip() {
        let mut model = AnomalyModel::new(small(), 3).unwrap();
        model.prepare_adapter_tuning(4, true);
        let ck = Checkpoint {
            model,
            seed: 3,
            step: 17,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint {
            model: AnomalyModel::new(small(), 1).unwrap(),
            seed: 1,
            step: 0,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan).is_err());
    }
}
