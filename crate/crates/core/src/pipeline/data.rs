//! Feature extraction and in-memory datasets.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::encoders::StubEmbedder;
use crate::error::{Error, Result};
use crate::io::{read_features, read_wav, write_features};
use crate::manifest::{ClipRecord, Manifest, Split};
use crate::pairing::FrameSet;
use crate::signal::{
    compute_corpus_stats, fbank, fit_frames, normalize_fbank, normalize_raw, CorpusStats,
    FbankConfig, FbankMatrix,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub stats: CorpusStats,
    pub n_clips: usize,
    pub frames: usize,
    pub bins: usize,
}

/// Waveform -> log-Mel -> fixed length, for one manifest record.
pub fn raw_features(dir: &Path, r: &ClipRecord, cfg: &FbankConfig) -> Result<FbankMatrix<f64>> {
    let wav = r
        .wav_path
        .as_ref()
        .ok_or_else(|| Error::data(format!("clip {} has no wav_path", r.clip_id)))?;
    let w = read_wav::<f64>(&dir.join(wav))?;
    let m = fbank(&normalize_raw(&w), cfg).map_err(|e| Error::data(format!("clip {}: {e}", r.clip_id)))?;
    Ok(fit_frames(&m, cfg.target_frames))
}

/// Compute features for every clip, normalize them with statistics of the
/// training split and write them to each record's `feature_path`.
pub fn extract_features(manifest: &Manifest, dir: &Path, cfg: &FbankConfig) -> Result<ExtractionSummary> {
    cfg.validate().map_err(|e| Error::config(e.to_string()))?;
    let raw: Vec<FbankMatrix<f64>> = manifest
        .records
        .par_iter()
        .map(|r| raw_features(dir, r, cfg))
        .collect::<Result<_>>()?;
    let train: Vec<&FbankMatrix<f64>> = manifest
        .records
        .iter()
        .zip(&raw)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(_, m)| m)
        .collect();
    if train.is_empty() {
        return Err(Error::data("manifest has no training clips for feature statistics"));
    }
    let stats = compute_corpus_stats(train.into_iter())?;
    manifest
        .records
        .par_iter()
        .zip(&raw)
        .try_for_each(|(r, m)| {
            let path = dir.join(&r.feature_path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let n = normalize_fbank(m, &stats);
            let single = FbankMatrix::new(n.values().mapv(|x| x as f32))?;
            write_features(&path, &single)
        })?;
    let summary = ExtractionSummary {
        stats,
        n_clips: raw.len(),
        frames: cfg.target_frames,
        bins: cfg.n_mels,
    };
    fs::write(dir.join(STATS_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// One clip ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub clip_id: String,
    /// Position within its split; keys per-clip random streams.
    pub index: u64,
    pub features: Array2<f32>,
    pub frames: FrameSet<f32>,
    /// Caption embeddings, one row per caption.
    pub captions: Array2<f32>,
    pub event_frame: Option<usize>,
}

impl ClipData {
    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ClipData>,
    pub val: Vec<ClipData>,
    pub test: Vec<ClipData>,
    pub image_stub: StubEmbedder,
    pub text_stub: StubEmbedder,
}

pub fn stubs(cfg: &RunConfig, latent_dim: usize) -> Result<(StubEmbedder, StubEmbedder)> {
    let d = cfg.model.encoder.dim;
    Ok((
        StubEmbedder::new(cfg.stubs.seed, latent_dim, d, cfg.stubs.jitter)?,
        StubEmbedder::new(cfg.stubs.seed, latent_dim, d, cfg.stubs.jitter)?,
    ))
}

fn rows(stub: &StubEmbedder, keys: impl Iterator<Item = String>, latents: &[Vec<f64>]) -> Result<Array2<f32>> {
    let d = stub.dim();
    let mut out = Array2::zeros((latents.len(), d));
    for ((mut row, key), lat) in out.rows_mut().into_iter().zip(keys).zip(latents) {
        let e = stub.embed::<f32>(&key, lat)?;
        row.assign(e.values());
    }
    Ok(out)
}

/// Frozen image embeddings of a record's frames.
pub fn frame_embeddings(stub: &StubEmbedder, r: &ClipRecord) -> Result<Array2<f32>> {
    rows(stub, (0..r.frame_latents.len()).map(|l| format!("img/{}/{l}", r.clip_id)), &r.frame_latents)
}

/// Frozen text embeddings of a record's captions.
pub fn caption_embeddings(stub: &StubEmbedder, r: &ClipRecord) -> Result<Array2<f32>> {
    rows(stub, (0..r.caption_latents.len()).map(|c| format!("txt/{}/{c}", r.clip_id)), &r.caption_latents)
}

fn load_split(
    manifest: &Manifest,
    dir: &Path,
    split: Split,
    cfg: &RunConfig,
    image: &StubEmbedder,
    text: &StubEmbedder,
) -> Result<Vec<ClipData>> {
    let expected = (cfg.features.target_frames, cfg.features.n_mels);
    manifest
        .split(split)
        .into_par_iter()
        .enumerate()
        .map(|(index, r)| {
            let m = read_features::<f32>(&dir.join(&r.feature_path))?;
            if (m.frames(), m.bins()) != expected {
                return Err(Error::data(format!(
                    "clip {}: features are {}x{}, config expects {}x{}",
                    r.clip_id,
                    m.frames(),
                    m.bins(),
                    expected.0,
                    expected.1
                )));
            }
            let frames = FrameSet::new(frame_embeddings(image, r)?, r.frame_timestamps.clone())
                .map_err(|e| Error::data(format!("clip {}: {e}", r.clip_id)))?;
            Ok(ClipData {
                clip_id: r.clip_id.clone(),
                index: index as u64,
                features: m.into_inner(),
                frames,
                captions: caption_embeddings(text, r)?,
                event_frame: r.event_frame,
            })
        })
        .collect()
}

/// Load features and frozen embeddings for every split.
pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    let latent_dim = manifest
        .latent_dim()
        .ok_or_else(|| Error::data("manifest is empty"))?;
    if manifest.frames_per_clip() != Some(cfg.frames()) {
        return Err(Error::data(format!(
            "manifest has {:?} frames per clip, config expects {}",
            manifest.frames_per_clip(),
            cfg.frames()
        )));
    }
    let (image_stub, text_stub) = stubs(cfg, latent_dim)?;
    let load = |s| load_split(&manifest, dir, s, cfg, &image_stub, &text_stub);
    let (train, val, test) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    Ok(Dataset {
        train,
        val,
        test,
        image_stub,
        text_stub,
    })
}

/// Generate the synthetic corpus into `dir` and extract its features.
pub fn synthesize(cfg: &RunConfig, dir: &Path) -> Result<(Manifest, ExtractionSummary)> {
    fs::create_dir_all(dir)?;
    let manifest = crate::synth::generate(&cfg.synth, &cfg.render, dir)?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    let summary = extract_features(&manifest, dir, &cfg.features)?;
    Ok((manifest, summary))
}

/// Re-extract features for an existing manifest in `dir`.
pub fn extract(cfg: &RunConfig, dir: &Path) -> Result<ExtractionSummary> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    extract_features(&manifest, dir, &cfg.features)
}
