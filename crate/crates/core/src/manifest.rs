//! JSON-lines clip manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub split: Split,
    /// XMF1 feature file, relative to the manifest directory.
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav_path: Option<String>,
    pub frame_timestamps: Vec<f64>,
    pub frame_latents: Vec<Vec<f64>>,
    pub caption_latents: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ClipRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let frames = self.records.first().map(|r| r.frame_latents.len());
        let latent = self
            .records
            .first()
            .and_then(|r| r.frame_latents.first())
            .map(Vec::len);
        for r in &self.records {
            if !ids.insert(r.clip_id.as_str()) {
                return Err(Error::data(format!("duplicate clip id {}", r.clip_id)));
            }
            if r.frame_latents.is_empty() || Some(r.frame_latents.len()) != frames {
                return Err(Error::data(format!("clip {}: inconsistent frame count", r.clip_id)));
            }
            if r.frame_timestamps.len() != r.frame_latents.len() {
                return Err(Error::data(format!("clip {}: timestamps do not match frames", r.clip_id)));
            }
            if r.caption_latents.is_empty() {
                return Err(Error::data(format!("clip {}: no captions", r.clip_id)));
            }
            if r
                .frame_latents
                .iter()
                .chain(&r.caption_latents)
                .any(|v| Some(v.len()) != latent)
            {
                return Err(Error::data(format!("clip {}: inconsistent latent size", r.clip_id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn frames_per_clip(&self) -> Option<usize> {
        self.records.first().map(|r| r.frame_latents.len())
    }

    pub fn latent_dim(&self) -> Option<usize> {
        self.records
            .first()
            .and_then(|r| r.frame_latents.first())
            .map(Vec::len)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open manifest {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ClipRecord = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(r);
        }
        Self::new(records)
    }
}
