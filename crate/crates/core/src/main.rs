use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tempo_align::error::{Error, Result};
use tempo_align::pairing::PairingStrategy;
use tempo_align::pipeline::{
    self, initial_checkpoint, load_dataset, Checkpoint, RunConfig, Stage, FINETUNE_STAGE,
    IMAGE_DIRECTIONS, PRETRAIN_STAGE, TEXT_DIRECTIONS,
};
use tempo_align::retrieval::Direction;

const THREADS_VAR: &str = "TEMPO_ALIGN_THREADS";

#[derive(Parser)]
#[command(name = "tempo-align", version, about = "Audio-image-text contrastive transfer with temporal frame pairing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (for `synth`, the corpus seed).
    #[arg(long)]
    seed: Option<u64>,
    /// random | nearest:<n> | multiframe
    #[arg(long)]
    strategy: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its features.
    Synth(Common),
    /// Recompute features for an existing corpus.
    Extract(Common),
    /// Audio-image pretraining.
    Pretrain(Common),
    /// Audio-text fine-tuning from a pretraining checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint (`.xck`) to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieval evaluation of one or more checkpoints on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; repeat to aggregate over seeds.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated subset of A->I, I->A, A->T, T->A.
        #[arg(long)]
        directions: Option<String>,
    },
    /// Train and evaluate every strategy of the comparison matrix.
    Matrix(Common),
}

fn load_config(c: &Common, stage: Stage) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.expect_stage(stage)?;
    if let Some(s) = &c.strategy {
        cfg.strategy = s.parse::<PairingStrategy>()?;
    }
    if let Some(seed) = c.seed {
        if stage == Stage::Synth {
            cfg.synth.seed = seed;
        } else {
            cfg.seeds = vec![seed];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(e.to_string()))
}

fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    s.split(',')
        .map(|d| match d.trim() {
            "A->I" => Ok(Direction::AudioToImage),
            "I->A" => Ok(Direction::ImageToAudio),
            "A->T" => Ok(Direction::AudioToText),
            "T->A" => Ok(Direction::TextToAudio),
            other => Err(Error::config(format!("unknown direction {other:?}"))),
        })
        .collect()
}

fn out_dir(c: &Common, cfg: &RunConfig, sub: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| cfg.out_dir.join(sub))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(c) => {
            let cfg = load_config(&c, Stage::Synth)?;
            let dir = c.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let (manifest, summary) = pipeline::synthesize(&cfg, &dir)?;
            println!(
                "wrote {} clips to {} (feature mean {:.4}, std {:.4})",
                manifest.records.len(),
                dir.display(),
                summary.stats.mean,
                summary.stats.std
            );
        }
        Command::Extract(c) => {
            let cfg = load_config(&c, Stage::Extract)?;
            let dir = c.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let summary = pipeline::extract(&cfg, &dir)?;
            println!("extracted {} clips in {}", summary.n_clips, dir.display());
        }
        Command::Pretrain(c) => {
            let cfg = load_config(&c, Stage::PretrainAi)?;
            let data = load_dataset(&cfg, &cfg.data_dir)?;
            let seed = cfg.seeds[0];
            let out = out_dir(&c, &cfg, PRETRAIN_STAGE);
            let init = initial_checkpoint(&cfg, &data, cfg.strategy, seed)?;
            let r = pipeline::run_pretrain(&cfg, &data, &init, cfg.strategy, seed, &out)?;
            print_log(&r.log);
            println!("checkpoint: {}", out.join("pretrain.xck").display());
        }
        Command::Finetune { common, checkpoint } => {
            let cfg = load_config(&common, Stage::FinetuneAt)?;
            let path = checkpoint.ok_or_else(|| Error::invalid("--checkpoint is required for finetune"))?;
            let from = Checkpoint::load(&path, cfg.pretrain.lars)?;
            let data = load_dataset(&cfg, &cfg.data_dir)?;
            let seed = common.seed.unwrap_or(from.meta.seed);
            let out = out_dir(&common, &cfg, FINETUNE_STAGE);
            let r = pipeline::run_finetune(&cfg, &data, &from, seed, &out)?;
            print_log(&r.log);
            println!("checkpoint: {}", out.join("finetune.xck").display());
        }
        Command::Evaluate {
            common,
            checkpoints,
            directions,
        } => {
            let cfg = load_config(&common, Stage::Evaluate)?;
            let cks = checkpoints
                .iter()
                .map(|p| Checkpoint::load(p, cfg.pretrain.lars))
                .collect::<Result<Vec<_>>>()?;
            let dirs = match directions {
                Some(d) => parse_directions(&d)?,
                None => default_directions(&cks[0]),
            };
            let data = load_dataset(&cfg, &cfg.data_dir)?;
            let out = out_dir(&common, &cfg, "evaluate");
            let (_, summary) = pipeline::run_evaluate(&cfg, &data, &cks, &dirs, &out)?;
            print!("{}", tempo_align::retrieval::format_table(&[(cks[0].meta.strategy.to_string(), summary)]));
        }
        Command::Matrix(c) => {
            let cfg = load_config(&c, Stage::Matrix)?;
            let data = load_dataset(&cfg, &cfg.data_dir)?;
            let out = out_dir(&c, &cfg, "matrix");
            let report = pipeline::run_experiment_matrix(&cfg, &data, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn default_directions(ck: &Checkpoint) -> Vec<Direction> {
    match ck.meta.stage.as_str() {
        PRETRAIN_STAGE => IMAGE_DIRECTIONS.to_vec(),
        FINETUNE_STAGE => TEXT_DIRECTIONS.to_vec(),
        _ => IMAGE_DIRECTIONS.iter().chain(&TEXT_DIRECTIONS).copied().collect(),
    }
}

fn print_log(log: &[pipeline::EpochLog]) {
    for e in log {
        let val: Vec<String> = e
            .val
            .iter()
            .map(|r| format!("{} R@{} {:.3}", r.direction, r.k, r.recall))
            .collect();
        println!(
            "{} epoch {:>3}  loss {:.4}  log_scale {:.3}  {}",
            e.stage,
            e.epoch,
            e.train_loss,
            e.log_scale,
            val.join("  ")
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
