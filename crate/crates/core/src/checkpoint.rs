//! JSON checkpoints: every named parameter as base64 of little-endian f64s.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModelConfig, RepeatedBlockNet};

pub const CHECKPOINT_VERSION: &str = "eloss-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBlob {
    pub shape: Vec<usize>,
    pub values: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub model: ModelConfig,
    /// Epochs trained when the checkpoint was taken.
    pub epoch: usize,
    pub layers: BTreeMap<String, LayerBlob>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, blob: &LayerBlob) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(&blob.values)
        .map_err(|e| Error::Checkpoint(format!("{name}: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{name}: byte count not a multiple of 8")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    pub fn from_net(net: &RepeatedBlockNet, epoch: usize) -> Result<Self> {
        let model = net
            .model
            .clone()
            .ok_or_else(|| Error::Checkpoint("network has no model description".into()))?;
        let layers = net
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, LayerBlob { shape: t.shape.clone(), values: encode(&t.values) }))
            .collect();
        Ok(Self { version: CHECKPOINT_VERSION.into(), model, epoch, layers })
    }

    /// Rebuilds the network and loads every parameter. Missing, extra or
    /// mis-shaped entries are errors.
    pub fn to_net(&self) -> Result<RepeatedBlockNet> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {:?}, expected {CHECKPOINT_VERSION:?}",
                self.version
            )));
        }
        let mut net = RepeatedBlockNet::from_config(&self.model, 0)?;
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.layers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.layers.len(),
                names.len()
            )));
        }
        for (name, param) in names.iter().zip(net.params_mut()) {
            let blob = self
                .layers
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if blob.shape != param.shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, model expects {:?}",
                    blob.shape, param.shape
                )));
            }
            let values = decode(name, blob)?;
            if values.len() != param.numel() {
                return Err(Error::Checkpoint(format!("{name}: wrong value count")));
            }
            param.values = values;
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
