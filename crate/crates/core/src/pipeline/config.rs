//! Run configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{token_grid, segment_rows, EncoderConfig, TokenGridSpec};
use crate::error::{Error, Result};
use crate::optim::{Decay, LarsConfig, ScheduleConfig};
use crate::pairing::PairingStrategy;
use crate::retrieval::{IMAGE_KS, TEXT_KS};
use crate::signal::FbankConfig;
use crate::synth::{RenderConfig, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Extract,
    PretrainAi,
    FinetuneAt,
    Evaluate,
    Matrix,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Synth => "synth",
            Stage::Extract => "extract",
            Stage::PretrainAi => "pretrain_ai",
            Stage::FinetuneAt => "finetune_at",
            Stage::Evaluate => "evaluate",
            Stage::Matrix => "matrix",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Patch shape shared by the audio and image encoders.
    pub patch: (usize, usize),
    pub audio_stride: (usize, usize),
    /// Input size of the image encoder the audio encoder is initialized from.
    pub image_input: (usize, usize),
    pub image_stride: (usize, usize),
    /// Seed of the image encoder weights used for initialization; the run
    /// seed is added to it.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            patch: (16, 16),
            audio_stride: (16, 8),
            image_input: (64, 64),
            image_stride: (16, 16),
            init_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubConfig {
    /// Shared by the image and text stubs, so both see one projection.
    pub seed: u64,
    pub jitter: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            seed: 77,
            jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub decay: Decay,
    pub lars: LarsConfig,
    /// Use only the first `n` training clips (all when absent).
    #[serde(default)]
    pub train_clips: Option<usize>,
}

impl StageConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            decay: self.decay,
        }
    }

    fn validate(&self, name: &str, n_train: usize) -> Result<()> {
        self.lars.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config(format!("{name}.batch_size must be at least 2")));
        }
        let clips = self.train_clips.unwrap_or(n_train).min(n_train);
        if self.epochs > 0 && self.batch_size > clips {
            return Err(Error::config(format!(
                "{name}.batch_size {} exceeds the {clips} training clips",
                self.batch_size
            )));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "{name}.warmup_epochs must be shorter than {name}.epochs"
            )));
        }
        Ok(())
    }
}

fn pretrain_defaults() -> StageConfig {
    StageConfig {
        epochs: 12,
        batch_size: 32,
        warmup_epochs: 4,
        decay: Decay::Cosine,
        lars: LarsConfig {
            trust_coefficient: 0.1,
            lr_weights: 0.02,
            lr_bias: 4.8e-4,
            ..LarsConfig::default()
        },
        train_clips: None,
    }
}

fn finetune_defaults() -> StageConfig {
    StageConfig {
        epochs: 8,
        batch_size: 32,
        warmup_epochs: 2,
        decay: Decay::Cosine,
        lars: LarsConfig {
            trust_coefficient: 0.05,
            lr_weights: 0.1,
            lr_bias: 2.4e-3,
            ..LarsConfig::default()
        },
        train_clips: Some(128),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub image_ks: Vec<usize>,
    pub text_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            image_ks: IMAGE_KS.to_vec(),
            text_ks: TEXT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub stage: Option<Stage>,
    pub strategy: PairingStrategy,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub synth: SceneSpec,
    pub render: RenderConfig,
    pub features: FbankConfig,
    pub model: ModelConfig,
    pub stubs: StubConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub eval: EvalConfig,
    /// Strategies compared by the matrix; defaults to random, nearest at
    /// gates 0 and half the pretraining epochs, and multiframe.
    #[serde(default)]
    pub matrix: Option<Vec<PairingStrategy>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: None,
            strategy: PairingStrategy::Random,
            seeds: vec![0, 1, 2],
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            synth: SceneSpec::default(),
            render: RenderConfig::default(),
            features: FbankConfig {
                n_mels: 32,
                target_frames: 128,
                ..FbankConfig::default()
            },
            model: ModelConfig::default(),
            stubs: StubConfig::default(),
            pretrain: pretrain_defaults(),
            finetune: finetune_defaults(),
            eval: EvalConfig::default(),
            matrix: None,
        }
    }
}

impl RunConfig {
    /// Parse a TOML document; omitted keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn fmt::Display| Error::config(e.to_string());
        let user: toml::Table = text.parse().map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| bad(&e))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering, excluding the stage and
    /// strategy so that matrix rows share one hash.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.stage = None;
        c.strategy = PairingStrategy::Random;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    /// Fails unless the config is meant for `stage` (or names no stage).
    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        match self.stage {
            Some(s) if s != stage => Err(Error::config(format!(
                "config is for stage {s}, not {stage}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn frames(&self) -> usize {
        self.synth.frames
    }

    pub fn audio_spec(&self) -> TokenGridSpec {
        TokenGridSpec::new(
            (self.features.target_frames, self.features.n_mels),
            self.model.patch,
            self.model.audio_stride,
        )
    }

    pub fn image_spec(&self) -> TokenGridSpec {
        TokenGridSpec::new(self.model.image_input, self.model.patch, self.model.image_stride)
    }

    pub fn matrix_strategies(&self) -> Vec<PairingStrategy> {
        self.matrix.clone().unwrap_or_else(|| {
            vec![
                PairingStrategy::Random,
                PairingStrategy::Nearest { gate: 0 },
                PairingStrategy::Nearest {
                    gate: self.pretrain.epochs / 2,
                },
                PairingStrategy::Multiframe,
            ]
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        self.synth.validate()?;
        self.render.validate()?;
        self.features.validate().map_err(|e| Error::config(e.to_string()))?;
        let enc = &self.model.encoder;
        if enc.width == 0 || enc.depth == 0 || enc.mlp_hidden == 0 || enc.dim == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        let geometry = |what: &str, spec: &TokenGridSpec| {
            token_grid(spec).map_err(|e| Error::config(format!("{what}: {e}")))
        };
        geometry("audio token grid", &self.audio_spec())?;
        geometry("image token grid", &self.image_spec())?;
        let seg = segment_rows(self.features.target_frames, self.frames())
            .map_err(|e| Error::config(e.to_string()))?;
        geometry(
            "audio segment token grid",
            &self.audio_spec().with_input((seg, self.features.n_mels)),
        )?;
        self.pretrain.validate("pretrain", self.synth.n_train)?;
        self.finetune.validate("finetune", self.synth.n_train)?;
        if self.eval.image_ks.is_empty() || self.eval.text_ks.is_empty() {
            return Err(Error::config("evaluation k lists must not be empty"));
        }
        if self.eval.image_ks.iter().chain(&self.eval.text_ks).any(|&k| k == 0) {
            return Err(Error::config("k must be at least 1"));
        }
        if let Some(m) = &self.matrix {
            if m.is_empty() {
                return Err(Error::config("matrix must list at least one strategy"));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.audio_spec().input, (128, 32));
        assert_eq!(token_grid(&cfg.audio_spec()).unwrap().n_tokens, 24);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "strategy = \"nearest:3\"\nseeds = [4]\n[pretrain]\nepochs = 6\n[synth]\nn_train = 64\n",
        )
        .unwrap();
        assert_eq!(cfg.strategy, PairingStrategy::Nearest { gate: 3 });
        assert_eq!(cfg.pretrain.epochs, 6);
        assert_eq!(cfg.pretrain.batch_size, 32);
        assert_eq!(cfg.finetune.epochs, 8);
        assert_eq!(cfg.matrix_strategies()[2], PairingStrategy::Nearest { gate: 3 });
    }

    #[test]
    fn invalid_configs_exit_with_two() {
        for text in [
            "seeds = []",
            "strategy = \"closest\"",
            "unknown_key = 1",
            "[pretrain]\nwarmup_epochs = 20",
            "[features]\ntarget_frames = 8",
            "[synth]\nevent_strength = 2.0",
        ] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn hash_ignores_strategy_and_stage() {
        let a = RunConfig::default();
        let b = RunConfig {
            strategy: PairingStrategy::Multiframe,
            stage: Some(Stage::PretrainAi),
            ..RunConfig::default()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { seeds: vec![9], ..RunConfig::default() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert!(b.expect_stage(Stage::FinetuneAt).is_err());
        assert!(a.expect_stage(Stage::FinetuneAt).is_ok());
    }
}
