//! Audio-image pretraining and audio-text fine-tuning.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{f32_log_scale, params_hash, Checkpoint, CheckpointMeta};
use super::config::{RunConfig, StageConfig};
use super::data::{ClipData, Dataset};
use super::evaluate::{eval_image_reports, eval_text_reports};
use crate::encoders::{
    backward, forward, forward_segments, init_audio_from_image, EncoderParams, Trace,
};
use crate::error::{Error, Result};
use crate::objective::{info_nce_grad, LogitScale};
use crate::optim::{lr_at, Lars};
use crate::pairing::{
    build_batch_sims, AudioRepr, BatchClip, EpochState, PairingStrategy, SelectionRecord,
};
use crate::encoders::key_hash;
use crate::retrieval::{ReportRow, RetrievalReport};

pub const PRETRAIN_STAGE: &str = "pretrain_ai";
pub const FINETUNE_STAGE: &str = "finetune_at";
pub const INIT_STAGE: &str = "init";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr_weights: f64,
    pub lr_bias: f64,
    pub train_loss: f64,
    pub log_scale: f64,
    /// Fraction of selections that hit the clip's event frame, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_hit_rate: Option<f64>,
    pub val: Vec<ReportRow>,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub selections: Vec<SelectionRecord>,
}

/// Audio encoder initialized from a seeded image encoder, with the default
/// logit scale and empty optimizer state.
pub fn initial_checkpoint(cfg: &RunConfig, data: &Dataset, strategy: PairingStrategy, seed: u64) -> Result<Checkpoint> {
    let image = EncoderParams::<f32>::random(
        &cfg.model.encoder,
        &cfg.image_spec(),
        cfg.model.init_seed.wrapping_add(seed),
    )?;
    let audio = init_audio_from_image(&image, &cfg.image_spec(), &cfg.audio_spec())?;
    let logit_scale = f32_log_scale(LogitScale::default().log_scale(), LogitScale::DEFAULT_CLAMP);
    Ok(Checkpoint {
        meta: CheckpointMeta {
            stage: INIT_STAGE.into(),
            strategy,
            epoch: 0,
            seed,
            config_hash: cfg.hash()?,
            init_hash: params_hash(&audio),
            image_stub: data.image_stub.fingerprint(),
            text_stub: data.text_stub.fingerprint(),
            log_scale: logit_scale.log_scale(),
        },
        audio,
        logit_scale,
        optimizer: Lars::new(cfg.pretrain.lars),
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drop-last batches of a permutation seeded by (seed, stage, epoch).
pub fn epoch_batches(n: usize, batch: usize, seed: u64, stage: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let key = splitmix(seed ^ key_hash(stage)) ^ splitmix(epoch as u64 + 1);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

enum Forward {
    Single(Array1<f32>, Trace<f32>),
    Segments(Array2<f32>, Vec<Trace<f32>>),
}

fn forward_clip(cfg: &RunConfig, params: &EncoderParams<f32>, clip: &ClipData, segments: bool) -> Result<Forward> {
    if segments {
        let outs = forward_segments(clip.features(), cfg.frames(), &cfg.audio_spec(), params)?;
        let d = params.dim();
        let mut block = Array2::zeros((outs.len(), d));
        let mut traces = Vec::with_capacity(outs.len());
        for (mut row, (e, t)) in block.rows_mut().into_iter().zip(outs) {
            row.assign(e.values());
            traces.push(t);
        }
        Ok(Forward::Segments(block, traces))
    } else {
        let (e, t) = forward(clip.features(), &cfg.audio_spec(), params)?;
        Ok(Forward::Single(e.into_inner(), t))
    }
}

/// Backward passes for every clip of a batch, summed in clip order.
fn batch_gradient(
    params: &EncoderParams<f32>,
    fwd: &[Forward],
    d_queries: ArrayView2<'_, f32>,
) -> EncoderParams<f32> {
    let per_clip: Vec<EncoderParams<f32>> = fwd
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut g = params.zeros_like();
            let row = d_queries.row(i);
            match f {
                Forward::Single(_, t) => backward(params, t, row, &mut g),
                Forward::Segments(block, traces) => {
                    let d = block.ncols();
                    for (l, t) in traces.iter().enumerate() {
                        backward(params, t, row.slice(s![l * d..(l + 1) * d]), &mut g);
                    }
                }
            }
            g
        })
        .collect();
    let mut total = params.zeros_like();
    for g in &per_clip {
        total.add_assign(g);
    }
    total
}

struct Stepper<'a> {
    stage: &'a StageConfig,
    prefix: &'static str,
}

impl Stepper<'_> {
    fn rates(&self, epoch: usize) -> Result<(f64, f64)> {
        let sch = self.stage.schedule();
        Ok((
            lr_at(epoch, self.stage.lars.lr_weights, &sch)?,
            lr_at(epoch, self.stage.lars.lr_bias, &sch)?,
        ))
    }

    fn apply(
        &self,
        ck: &mut Checkpoint,
        grads: &EncoderParams<f32>,
        d_log_scale: f32,
        lr: (f64, f64),
    ) -> Result<()> {
        ck.optimizer.step_encoder(self.prefix, &mut ck.audio, grads, lr.0, lr.1)?;
        let mut ls = [ck.logit_scale.log_scale() as f32];
        ck.optimizer.step_tensor(LOGIT_TENSOR, true, &mut ls, &[d_log_scale], lr.0, lr.1)?;
        ck.logit_scale = f32_log_scale(f64::from(ls[0]), ck.logit_scale.clamp_max());
        ck.meta.log_scale = ck.logit_scale.log_scale();
        if !ck.audio.is_finite() {
            return Err(Error::invalid("training diverged: non-finite parameters"));
        }
        Ok(())
    }
}

const LOGIT_TENSOR: &str = "logit_scale";

fn train_subset<'a>(data: &'a [ClipData], stage: &StageConfig) -> &'a [ClipData] {
    let n = stage.train_clips.unwrap_or(data.len()).min(data.len());
    &data[..n]
}

fn r1_sum(reports: &[RetrievalReport]) -> f64 {
    reports.iter().filter_map(|r| r.recall(1)).sum()
}

fn rows_of(reports: &[RetrievalReport], seed: u64) -> Vec<ReportRow> {
    reports.iter().flat_map(|r| r.rows(seed)).collect()
}

/// Contrastive audio-image training against frozen frame embeddings.
pub fn pretrain_audio_image(
    cfg: &RunConfig,
    data: &Dataset,
    init: &Checkpoint,
    strategy: PairingStrategy,
    seed: u64,
) -> Result<StageResult> {
    let stage = &cfg.pretrain;
    let train = train_subset(&data.train, stage);
    let mut ck = init.clone();
    ck.optimizer = Lars::new(stage.lars);
    ck.meta.stage = PRETRAIN_STAGE.into();
    ck.meta.strategy = strategy;
    ck.meta.seed = seed;
    ck.meta.epoch = 0;
    let stepper = Stepper { stage, prefix: "audio" };
    let segments = strategy.is_multiframe();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut log = Vec::with_capacity(stage.epochs);
    let mut selections = Vec::new();

    for epoch in 0..stage.epochs {
        let lr = stepper.rates(epoch)?;
        let st = EpochState { epoch };
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        let (mut hits, mut judged) = (0usize, 0usize);
        for batch in epoch_batches(train.len(), stage.batch_size, seed, PRETRAIN_STAGE, epoch) {
            let clips: Vec<&ClipData> = batch.iter().map(|&i| &train[i]).collect();
            let fwd: Vec<Forward> = clips
                .par_iter()
                .map(|c| forward_clip(cfg, &ck.audio, c, segments))
                .collect::<Result<_>>()?;
            let audio: Vec<AudioRepr<f32>> = fwd
                .iter()
                .map(|f| match f {
                    Forward::Single(e, _) => AudioRepr::Single(e.clone()),
                    Forward::Segments(b, _) => AudioRepr::Segments(b.clone()),
                })
                .collect();
            let batch_clips: Vec<BatchClip<'_, f32>> = clips
                .iter()
                .map(|c| BatchClip {
                    clip_id: &c.clip_id,
                    clip_index: c.index,
                    frames: &c.frames,
                })
                .collect();
            let sims = build_batch_sims(strategy, &batch_clips, &audio, st, seed, &ck.logit_scale)?;
            let g = info_nce_grad(sims.queries.view(), sims.keys.view(), &ck.logit_scale)?;
            let grads = batch_gradient(&ck.audio, &fwd, g.d_queries.view());
            stepper.apply(&mut ck, &grads, g.d_log_scale, lr)?;
            loss_sum += f64::from(g.loss);
            n_batches += 1;
            for (rec, c) in sims.selections.iter().zip(&clips) {
                if let (Some(chosen), Some(event)) = (rec.chosen_index, c.event_frame) {
                    judged += 1;
                    hits += usize::from(chosen == event);
                }
            }
            selections.extend(sims.selections);
        }
        ck.meta.epoch = epoch + 1;
        let val = eval_image_reports(cfg, &ck.audio, &data.val, strategy, &cfg.eval.image_ks)?;
        let score = r1_sum(&val);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, ck.clone()));
        }
        log.push(EpochLog {
            stage: PRETRAIN_STAGE.into(),
            epoch,
            lr_weights: lr.0,
            lr_bias: lr.1,
            train_loss: if n_batches > 0 { loss_sum / n_batches as f64 } else { f64::NAN },
            log_scale: ck.logit_scale.log_scale(),
            event_hit_rate: (judged > 0).then(|| hits as f64 / judged as f64),
            val: rows_of(&val, seed),
        });
    }
    let best = best.map_or_else(|| ck.clone(), |(_, b)| b);
    Ok(StageResult {
        last: ck,
        best,
        log,
        selections,
    })
}

/// Contrastive audio-text training against frozen caption embeddings. Each
/// training clip contributes its first caption.
pub fn finetune_audio_text(cfg: &RunConfig, data: &Dataset, from: &Checkpoint, seed: u64) -> Result<StageResult> {
    let stage = &cfg.finetune;
    let train = train_subset(&data.train, stage);
    let mut ck = from.clone();
    ck.optimizer = Lars::new(stage.lars);
    ck.meta.stage = FINETUNE_STAGE.into();
    ck.meta.seed = seed;
    ck.meta.epoch = 0;
    let stepper = Stepper { stage, prefix: "audio" };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut log = Vec::with_capacity(stage.epochs);

    for epoch in 0..stage.epochs {
        let lr = stepper.rates(epoch)?;
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for batch in epoch_batches(train.len(), stage.batch_size, seed, FINETUNE_STAGE, epoch) {
            let clips: Vec<&ClipData> = batch.iter().map(|&i| &train[i]).collect();
            let fwd: Vec<Forward> = clips
                .par_iter()
                .map(|c| forward_clip(cfg, &ck.audio, c, false))
                .collect::<Result<_>>()?;
            let d = ck.audio.dim();
            let mut queries = Array2::zeros((clips.len(), d));
            let mut keys = Array2::zeros((clips.len(), d));
            for (i, (f, c)) in fwd.iter().zip(&clips).enumerate() {
                if let Forward::Single(e, _) = f {
                    queries.row_mut(i).assign(e);
                }
                keys.row_mut(i).assign(&c.captions.index_axis(Axis(0), 0));
            }
            let g = info_nce_grad(queries.view(), keys.view(), &ck.logit_scale)?;
            let grads = batch_gradient(&ck.audio, &fwd, g.d_queries.view());
            stepper.apply(&mut ck, &grads, g.d_log_scale, lr)?;
            loss_sum += f64::from(g.loss);
            n_batches += 1;
        }
        ck.meta.epoch = epoch + 1;
        let val = eval_text_reports(cfg, &ck.audio, &data.val, &cfg.eval.text_ks)?;
        let score = r1_sum(&val);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, ck.clone()));
        }
        log.push(EpochLog {
            stage: FINETUNE_STAGE.into(),
            epoch,
            lr_weights: lr.0,
            lr_bias: lr.1,
            train_loss: if n_batches > 0 { loss_sum / n_batches as f64 } else { f64::NAN },
            log_scale: ck.logit_scale.log_scale(),
            event_hit_rate: None,
            val: rows_of(&val, seed),
        });
    }
    let best = best.map_or_else(|| ck.clone(), |(_, b)| b);
    Ok(StageResult {
        last: ck,
        best,
        log,
        selections: Vec::new(),
    })
}

/// Mean training loss of one pass over `clips` without updating anything.
pub fn audio_text_loss(cfg: &RunConfig, ck: &Checkpoint, clips: &[ClipData]) -> Result<f64> {
    let audio = super::evaluate::embed_audio(cfg, &ck.audio, clips)?;
    let d = ck.audio.dim();
    let mut caps = Array2::zeros((clips.len(), d));
    for (i, c) in clips.iter().enumerate() {
        caps.row_mut(i).assign(&c.captions.index_axis(Axis(0), 0));
    }
    let g = info_nce_grad(audio.view(), caps.view(), &ck.logit_scale)?;
    Ok(f64::from(g.loss))
}
