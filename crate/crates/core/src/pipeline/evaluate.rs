//! Embedding of evaluation splits and retrieval reports.

use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{ClipData, Dataset};
use crate::encoders::{encode_segments, forward, key_hash, EncoderParams};
use crate::error::{Error, Result};
use crate::pairing::{clip_rng, PairingStrategy};
use crate::retrieval::{
    eval_audio_image, eval_audio_text, Direction, ImageMode, ReportRow, RetrievalReport,
};

const EVAL_IMAGE_SALT: u64 = 0x5EED_1A6E;

/// Whole-clip audio embeddings, one row per clip.
pub fn embed_audio(cfg: &RunConfig, params: &EncoderParams<f32>, clips: &[ClipData]) -> Result<Array2<f32>> {
    let rows: Vec<_> = clips
        .par_iter()
        .map(|c| forward(c.features(), &cfg.audio_spec(), params).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((clips.len(), params.dim()));
    for (mut row, e) in out.rows_mut().into_iter().zip(&rows) {
        row.assign(e.values());
    }
    Ok(out)
}

/// Flattened per-segment embeddings, one `L * D` row per clip.
pub fn embed_segments(cfg: &RunConfig, params: &EncoderParams<f32>, clips: &[ClipData]) -> Result<Array2<f32>> {
    let l = cfg.frames();
    let d = params.dim();
    let blocks: Vec<_> = clips
        .par_iter()
        .map(|c| encode_segments(c.features(), l, &cfg.audio_spec(), params))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((clips.len(), l * d));
    for (mut row, segs) in out.rows_mut().into_iter().zip(&blocks) {
        for (i, e) in segs.iter().enumerate() {
            row.slice_mut(ndarray::s![i * d..(i + 1) * d]).assign(e.values());
        }
    }
    Ok(out)
}

/// The single frame standing in for a clip's image at evaluation time. It
/// depends only on the dataset seed and the clip id, so every strategy is
/// scored against the same images.
pub fn eval_image_index(cfg: &RunConfig, clip: &ClipData) -> usize {
    let mut rng = clip_rng(cfg.synth.seed ^ EVAL_IMAGE_SALT, 0, key_hash(&clip.clip_id));
    rng.gen_range(0..clip.frames.len())
}

/// Image-side gallery and comparison mode for a trained strategy.
pub fn image_gallery(cfg: &RunConfig, clips: &[ClipData], strategy: PairingStrategy) -> (Array2<f32>, ImageMode) {
    let d = clips.first().map_or(0, |c| c.frames.frames().ncols());
    let l = cfg.frames();
    if strategy.is_multiframe() {
        let mut out = Array2::zeros((clips.len(), l * d));
        for (mut row, c) in out.rows_mut().into_iter().zip(clips) {
            row.iter_mut().zip(c.frames.frames().iter()).for_each(|(o, &x)| *o = x);
        }
        (out, ImageMode::Multiframe { frames: l })
    } else {
        let mut out = Array2::zeros((clips.len(), d));
        for (mut row, c) in out.rows_mut().into_iter().zip(clips) {
            row.assign(&c.frames.frames().index_axis(Axis(0), eval_image_index(cfg, c)));
        }
        (out, ImageMode::Single)
    }
}

pub fn eval_image_reports(
    cfg: &RunConfig,
    params: &EncoderParams<f32>,
    clips: &[ClipData],
    strategy: PairingStrategy,
    ks: &[usize],
) -> Result<Vec<RetrievalReport>> {
    if clips.is_empty() {
        return Err(Error::data("evaluation split is empty"));
    }
    let audio = if strategy.is_multiframe() {
        embed_segments(cfg, params, clips)?
    } else {
        embed_audio(cfg, params, clips)?
    };
    let (images, mode) = image_gallery(cfg, clips, strategy);
    Ok(eval_audio_image(audio.view(), images.view(), mode, ks)?.to_vec())
}

pub fn eval_text_reports(
    cfg: &RunConfig,
    params: &EncoderParams<f32>,
    clips: &[ClipData],
    ks: &[usize],
) -> Result<Vec<RetrievalReport>> {
    let first = clips.first().ok_or_else(|| Error::data("evaluation split is empty"))?;
    let per_clip = first.captions.nrows();
    if clips.iter().any(|c| c.captions.nrows() != per_clip) {
        return Err(Error::data("evaluation clips have differing caption counts"));
    }
    let audio = embed_audio(cfg, params, clips)?;
    let d = first.captions.ncols();
    let mut captions = Array2::zeros((clips.len() * per_clip, d));
    for (i, c) in clips.iter().enumerate() {
        captions
            .slice_mut(ndarray::s![i * per_clip..(i + 1) * per_clip, ..])
            .assign(&c.captions);
    }
    Ok(eval_audio_text(audio.view(), captions.view(), per_clip, ks)?.to_vec())
}

/// Reports of one checkpoint on the test split for the requested
/// directions.
pub fn evaluate(
    cfg: &RunConfig,
    data: &Dataset,
    ck: &Checkpoint,
    directions: &[Direction],
) -> Result<Vec<RetrievalReport>> {
    let want = |d: Direction| directions.contains(&d);
    let mut out = Vec::new();
    if want(Direction::AudioToImage) || want(Direction::ImageToAudio) {
        let r = eval_image_reports(cfg, &ck.audio, &data.test, ck.meta.strategy, &cfg.eval.image_ks)?;
        out.extend(r.into_iter().filter(|r| want(r.direction)));
    }
    if want(Direction::AudioToText) || want(Direction::TextToAudio) {
        let r = eval_text_reports(cfg, &ck.audio, &data.test, &cfg.eval.text_ks)?;
        out.extend(r.into_iter().filter(|r| want(r.direction)));
    }
    Ok(out)
}

/// Evaluation output written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub strategy: PairingStrategy,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub rows: Vec<ReportRow>,
    pub reports: Vec<RetrievalReport>,
}

impl EvalDocument {
    pub fn new(ck: &Checkpoint, reports: Vec<RetrievalReport>) -> Self {
        let rows = reports.iter().flat_map(|r| r.rows(ck.meta.seed)).collect();
        Self {
            strategy: ck.meta.strategy,
            seed: ck.meta.seed,
            checkpoint_hash: ck.params_hash(),
            rows,
            reports,
        }
    }
}
