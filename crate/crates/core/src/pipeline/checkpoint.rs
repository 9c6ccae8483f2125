//! Training checkpoints: an XCK1 tensor file plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::io::{decode_checkpoint, encode_checkpoint, NamedTensor, TensorMap};
use crate::objective::LogitScale;
use crate::optim::{Lars, LarsConfig};
use crate::pairing::PairingStrategy;

const AUDIO_PREFIX: &str = "audio";
const LOGIT_SCALE: &str = "logit_scale";
const EPOCH: &str = "meta/epoch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub strategy: PairingStrategy,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the audio parameters this lineage started from.
    pub init_hash: String,
    pub image_stub: String,
    pub text_stub: String,
    pub log_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub audio: EncoderParams<f32>,
    pub logit_scale: LogitScale,
    pub optimizer: Lars<f32>,
    pub meta: CheckpointMeta,
}

/// Largest `f32` value not above `min(v, clamp)`, so a logit scale survives
/// an `f32` round trip unchanged.
pub fn f32_log_scale(v: f64, clamp: f64) -> LogitScale {
    let mut q = v.min(clamp) as f32;
    while f64::from(q) > clamp {
        q = f32::from_bits(if q > 0.0 { q.to_bits() - 1 } else { q.to_bits() + 1 });
    }
    LogitScale::with_clamp(f64::from(q), clamp)
}

/// SHA-256 over every audio tensor's name, shape and values.
pub fn params_hash(p: &EncoderParams<f32>) -> String {
    let mut h = Sha256::new();
    for t in p.tensors() {
        h.update(t.name.as_bytes());
        for d in &t.dims {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn tensors(&self) -> TensorMap {
        let mut map = TensorMap::new();
        self.audio.export(AUDIO_PREFIX, &mut map);
        map.insert(LOGIT_SCALE.into(), NamedTensor::scalar(self.logit_scale.log_scale() as f32));
        map.insert(EPOCH.into(), NamedTensor::scalar(self.meta.epoch as f32));
        self.optimizer.export(&mut map);
        map
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&self.tensors())
    }

    pub fn params_hash(&self) -> String {
        params_hash(&self.audio)
    }

    /// Write `<stem>.xck` and `<stem>.json`; returns the tensor file path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{stem}.xck"));
        fs::write(&path, self.encode()?)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.meta)? + "\n",
        )?;
        Ok(path)
    }

    /// Load `<stem>.xck` with its sidecar. `lars` configures the restored
    /// optimizer.
    pub fn load(xck: &Path, lars: LarsConfig) -> Result<Self> {
        let bytes = fs::read(xck)
            .map_err(|e| Error::invalid(format!("cannot read checkpoint {}: {e}", xck.display())))?;
        let map = decode_checkpoint(&bytes)?;
        let sidecar = xck.with_extension("json");
        let meta: CheckpointMeta = serde_json::from_str(
            &fs::read_to_string(&sidecar)
                .map_err(|e| Error::data(format!("cannot read {}: {e}", sidecar.display())))?,
        )?;
        let audio = EncoderParams::import(&map, AUDIO_PREFIX)?;
        let ls = map
            .get(LOGIT_SCALE)
            .and_then(|t| t.values.first().copied())
            .ok_or_else(|| Error::data("checkpoint lacks logit_scale"))?;
        if f64::from(ls) != meta.log_scale {
            return Err(Error::data("logit scale in tensor file and sidecar disagree"));
        }
        Ok(Self {
            audio,
            logit_scale: f32_log_scale(f64::from(ls), LogitScale::DEFAULT_CLAMP),
            optimizer: Lars::import(lars, &map),
            meta,
        })
    }
}
