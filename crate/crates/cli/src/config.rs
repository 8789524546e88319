//! JSON run configurations. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shd_core::distill::{AttnLossKind, Baseline, DistillConfig};
use shd_core::harness::{make_dataset, Sample, TaskKind, TinyTransformerConfig, TrainConfig};
use shd_core::squeeze::MergeStrategy;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
    #[serde(default = "yes")]
    pub causal: bool,
}

fn yes() -> bool {
    true
}

impl From<ModelSection> for TinyTransformerConfig {
    fn from(m: ModelSection) -> Self {
        TinyTransformerConfig {
            vocab: m.vocab,
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            max_seq: m.max_seq,
            causal: m.causal,
        }
    }
}

impl From<TinyTransformerConfig> for ModelSection {
    fn from(m: TinyTransformerConfig) -> Self {
        ModelSection {
            vocab: m.vocab,
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            max_seq: m.max_seq,
            causal: m.causal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// `copy`, `sort` or `char_lm`.
    pub kind: String,
    pub seq_len: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    /// Training data uses this seed, validation data `seed + 1`.
    #[serde(default)]
    pub seed: u64,
}

fn default_train_size() -> usize {
    2000
}

fn default_val_size() -> usize {
    200
}

impl TaskSection {
    pub fn kind(&self) -> Result<TaskKind, CliError> {
        Ok(self.kind.parse::<TaskKind>()?)
    }

    pub fn datasets(&self, vocab: usize) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
        let kind = self.kind()?;
        Ok((
            make_dataset(kind, self.seed, self.train_size, self.seq_len, vocab)?,
            make_dataset(kind, self.seed.wrapping_add(1), self.val_size, self.seq_len, vocab)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub val_every: usize,
    pub grad_clip: f64,
    pub alpha_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: t.seed,
            val_every: t.val_every,
            grad_clip: t.grad_clip,
            alpha_every: t.alpha_every,
        }
    }
}

impl From<&TrainSection> for TrainConfig {
    fn from(t: &TrainSection) -> Self {
        TrainConfig {
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: t.seed,
            val_every: t.val_every,
            grad_clip: t.grad_clip,
            alpha_every: t.alpha_every,
        }
    }
}

/// `train-teacher` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherRunConfig {
    pub model: ModelSection,
    pub task: TaskSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ImageGeneration,
    LanguageModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineName {
    SelfCorrelation,
    Projector,
}

/// Distillation hyperparameters; absent fields come from `preset`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub preset: Option<Preset>,
    pub beta: Option<f64>,
    pub attn_temperature: Option<f64>,
    pub logit_temperature: Option<f64>,
    pub kd_weight: Option<f64>,
    pub aux_weight: Option<f64>,
    pub baseline: Option<BaselineName>,
    /// Seed of the one-time head draw for `--strategy hard-select`.
    pub hard_select_seed: Option<u64>,
}

impl DistillSection {
    pub fn resolve(&self, strategy: StrategyFlag, attn_loss: AttnLossKind) -> DistillConfig {
        let base = match self.preset.unwrap_or(Preset::ImageGeneration) {
            Preset::ImageGeneration => DistillConfig::image_generation(),
            Preset::LanguageModel => DistillConfig::language_model(),
        };
        DistillConfig {
            beta: self.beta.unwrap_or(base.beta),
            attn_temperature: self.attn_temperature.unwrap_or(base.attn_temperature),
            logit_temperature: self.logit_temperature.unwrap_or(base.logit_temperature),
            kd_weight: self.kd_weight.unwrap_or(base.kd_weight),
            aux_weight: self.aux_weight.unwrap_or(base.aux_weight),
            strategy: match strategy {
                StrategyFlag::Shd => MergeStrategy::Shd,
                StrategyFlag::Constant => MergeStrategy::ConstantHalf,
                StrategyFlag::HardSelect => MergeStrategy::HardSelect {
                    seed: self.hard_select_seed.unwrap_or(0),
                },
                StrategyFlag::HeadMatch => MergeStrategy::HeadMatch,
            },
            attn_loss,
            baseline: self.baseline.map(|b| match b {
                BaselineName::SelfCorrelation => Baseline::SelfCorrelation,
                BaselineName::Projector => Baseline::Projector,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StrategyFlag {
    Shd,
    Constant,
    HardSelect,
    HeadMatch,
}

/// `distill` input. The task defaults to the teacher's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRunConfig {
    pub student: ModelSection,
    #[serde(default)]
    pub task: Option<TaskSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub distill: DistillSection,
    /// Leading training samples used to calibrate head matching.
    #[serde(default = "default_calibration")]
    pub calibration_size: usize,
}

fn default_calibration() -> usize {
    32
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}
