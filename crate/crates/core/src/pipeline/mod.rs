//! Three-stage recipe: frozen image-text space, audio-image pretraining,
//! audio-text fine-tuning; plus evaluation and the strategy comparison
//! matrix. Every output file is a pure function of (config, seed, data).

mod checkpoint;
mod config;
mod data;
mod evaluate;
mod train;


use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{f32_log_scale, params_hash, Checkpoint, CheckpointMeta};
pub use config::{EvalConfig, ModelConfig, RunConfig, Stage, StageConfig, StubConfig};
pub use data::{
    caption_embeddings, extract, extract_features, frame_embeddings, load_dataset, raw_features,
    stubs, synthesize, ClipData, Dataset, ExtractionSummary, MANIFEST_FILE, STATS_FILE,
};
pub use evaluate::{
    embed_audio, embed_segments, eval_image_index, eval_image_reports, eval_text_reports, evaluate,
    image_gallery, EvalDocument,
};
pub use train::{
    audio_text_loss, epoch_batches, finetune_audio_text, initial_checkpoint, pretrain_audio_image,
    EpochLog, StageResult, FINETUNE_STAGE, INIT_STAGE, PRETRAIN_STAGE,
};

use crate::error::Result;
use crate::pairing::PairingStrategy;
use crate::retrieval::{format_table, summarize, Direction, ReportRow, Summary};

pub const IMAGE_DIRECTIONS: [Direction; 2] = [Direction::AudioToImage, Direction::ImageToAudio];
pub const TEXT_DIRECTIONS: [Direction; 2] = [Direction::AudioToText, Direction::TextToAudio];

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Directory-safe name of a strategy.
pub fn strategy_label(s: PairingStrategy) -> String {
    s.to_string().replace(':', "-")
}

/// Pretrain one strategy and write `pretrain.xck`, `pretrain_best.xck`,
/// `pretrain_log.jsonl` and `selections.jsonl` under `out`.
pub fn run_pretrain(
    cfg: &RunConfig,
    data: &Dataset,
    init: &Checkpoint,
    strategy: PairingStrategy,
    seed: u64,
    out: &Path,
) -> Result<StageResult> {
    fs::create_dir_all(out)?;
    let r = pretrain_audio_image(cfg, data, init, strategy, seed)?;
    r.last.save(out, "pretrain")?;
    r.best.save(out, "pretrain_best")?;
    write_jsonl(&out.join("pretrain_log.jsonl"), &r.log)?;
    write_jsonl(&out.join("selections.jsonl"), &r.selections)?;
    Ok(r)
}

/// Fine-tune from `from` and write `finetune.xck`, `finetune_best.xck` and
/// `finetune_log.jsonl` under `out`.
pub fn run_finetune(cfg: &RunConfig, data: &Dataset, from: &Checkpoint, seed: u64, out: &Path) -> Result<StageResult> {
    fs::create_dir_all(out)?;
    let r = finetune_audio_text(cfg, data, from, seed)?;
    r.last.save(out, "finetune")?;
    r.best.save(out, "finetune_best")?;
    write_jsonl(&out.join("finetune_log.jsonl"), &r.log)?;
    Ok(r)
}

/// Evaluate checkpoints and write `report.json` (one record per direction,
/// k and seed) and `report.txt` (mean ± std across checkpoints).
pub fn run_evaluate(
    cfg: &RunConfig,
    data: &Dataset,
    checkpoints: &[Checkpoint],
    directions: &[Direction],
    out: &Path,
) -> Result<(Vec<ReportRow>, Vec<Summary>)> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for ck in checkpoints {
        let reports = evaluate(cfg, data, ck, directions)?;
        rows.extend(reports.iter().flat_map(|r| r.rows(ck.meta.seed)));
    }
    let summary = summarize(&rows);
    write_json(&out.join("report.json"), &rows)?;
    let label = checkpoints
        .first()
        .map_or_else(String::new, |c| c.meta.strategy.to_string());
    fs::write(out.join("report.txt"), format_table(&[(label, summary.clone())]))?;
    Ok((rows, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub strategy: PairingStrategy,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<Summary>,
    pub checkpoints: BTreeMap<u64, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub config_hash: String,
    /// Initial audio parameter hash per seed, shared by every row.
    pub init_hashes: BTreeMap<u64, String>,
    pub image_stub: String,
    pub text_stub: String,
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    pub fn row(&self, s: PairingStrategy) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    /// Mean recall of `(direction, k)` for a strategy.
    pub fn mean(&self, s: PairingStrategy, d: Direction, k: usize) -> Option<f64> {
        self.row(s)?
            .summary
            .iter()
            .find(|c| c.direction == d && c.k == k)
            .map(|c| c.mean)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, Vec<Summary>)> = self
            .rows
            .iter()
            .map(|r| (r.strategy.to_string(), r.summary.clone()))
            .collect();
        format_table(&rows)
    }
}

/// Train every strategy of the matrix for every seed from a shared
/// initialization, then evaluate A<->I after pretraining and A<->T after
/// fine-tuning. Writes per-run artifacts under `out/<strategy>/seed-<s>/`
/// and `matrix.json` / `matrix.txt` at the top.
pub fn run_experiment_matrix(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<MatrixReport> {
    let strategies = cfg.matrix_strategies();
    fs::create_dir_all(out)?;
    let mut init_hashes = BTreeMap::new();
    let mut rows: Vec<MatrixRow> = strategies
        .iter()
        .map(|&strategy| MatrixRow {
            strategy,
            rows: Vec::new(),
            summary: Vec::new(),
            checkpoints: BTreeMap::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let init = initial_checkpoint(cfg, data, PairingStrategy::Random, seed)?;
        init_hashes.insert(seed, init.params_hash());
        for row in rows.iter_mut() {
            let dir: PathBuf = out.join(strategy_label(row.strategy)).join(format!("seed-{seed}"));
            log::info!("matrix: {} seed {seed}", row.strategy);
            let pre = run_pretrain(cfg, data, &init, row.strategy, seed, &dir)?;
            let fine = run_finetune(cfg, data, &pre.last, seed, &dir)?;
            let mut reports = evaluate(cfg, data, &pre.last, &IMAGE_DIRECTIONS)?;
            reports.extend(evaluate(cfg, data, &fine.last, &TEXT_DIRECTIONS)?);
            let doc = EvalDocument::new(&fine.last, reports);
            write_json(&dir.join("report.json"), &doc)?;
            row.rows.extend(doc.rows);
            row.checkpoints.insert(seed, fine.last.params_hash());
        }
    }
    for row in rows.iter_mut() {
        row.summary = summarize(&row.rows);
    }
    let report = MatrixReport {
        config_hash: cfg.hash()?,
        init_hashes,
        image_stub: data.image_stub.fingerprint(),
        text_stub: data.text_stub.fingerprint(),
        rows,
    };
    write_json(&out.join("matrix.json"), &report)?;
    fs::write(out.join("matrix.txt"), report.table())?;
    Ok(report)
}
