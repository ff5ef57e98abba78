//! The experiment configuration document.
//!
//! One JSON file drives every command. Unknown fields are rejected at parse
//! time and every dimension inconsistency is reported with the offending
//! field path before any computation starts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterKind};
use crate::datasynth::{DataError, SynthTaskConfig};
use crate::decoding::{DecodeConfig, DecodeMode};
use crate::model::{AdapterSpec, ModelConfig};
use crate::preference::SweepScheme;
use crate::training::{AdamConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub kind: AdapterKind,
    pub r1: usize,
    pub r2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub k: usize,
    pub token_classes: Vec<Vec<u32>>,
    pub prompt_len: usize,
    pub response_len: usize,
    pub dataset_size: usize,
    /// Objective descriptions, embedded through the model's token table.
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub beta_r: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub beta: f64,
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub scheme: SweepScheme,
    /// How many test prompts each sweep vector decodes.
    pub num_prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub task: TaskSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub sweep: SweepSection,
    pub split: SplitSection,
    pub seed: u64,
    #[serde(default)]
    pub paths: Option<PathsSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.vocab_size < 2 {
            return Err(invalid("model.vocab_size", "must be at least 2"));
        }
        if m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) {
            return Err(invalid(
                "model.n_heads",
                format!("d_model {} must be divisible by n_heads {}", m.d_model, m.n_heads),
            ));
        }
        if m.n_layers == 0 {
            return Err(invalid("model.n_layers", "must be positive"));
        }

        let a = &self.adapter;
        if a.r1 + a.r2 == 0 {
            return Err(invalid("adapter.r1", "r1 + r2 must be at least 1"));
        }
        if a.r1 > m.d_model || a.r2 > m.d_model {
            return Err(invalid(
                "adapter.r1",
                format!("ranks must not exceed d_model {}", m.d_model),
            ));
        }

        let t = &self.task;
        if t.k < 2 {
            return Err(invalid("task.k", "need at least 2 objectives"));
        }
        if t.token_classes.len() != t.k {
            return Err(invalid(
                "task.token_classes",
                format!("expected {} classes, found {}", t.k, t.token_classes.len()),
            ));
        }
        if t.descriptions.len() != t.k {
            return Err(invalid(
                "task.descriptions",
                format!("expected {} descriptions, found {}", t.k, t.descriptions.len()),
            ));
        }
        if t.descriptions.iter().any(|d| d.is_empty()) {
            return Err(invalid("task.descriptions", "descriptions must be nonempty"));
        }
        if let Err(e) = self.synth_task().validate(m.vocab_size) {
            let field = match e {
                DataError::ClassOverlap { .. } => "task.token_classes",
                DataError::VocabularyTooSmall { .. } => "task.token_classes",
                _ => "task",
            };
            return Err(invalid(field, e.to_string()));
        }
        if t.prompt_len + t.response_len > m.max_seq_len {
            return Err(invalid(
                "task.response_len",
                format!(
                    "prompt_len {} + response_len {} exceeds max_seq_len {}",
                    t.prompt_len, t.response_len, m.max_seq_len
                ),
            ));
        }

        let tr = &self.train;
        if tr.epochs == 0 || tr.batch_size == 0 {
            return Err(invalid("train.epochs", "epochs and batch_size must be positive"));
        }
        if !(tr.beta_r >= 0.0) {
            return Err(invalid("train.beta_r", "must be nonnegative"));
        }
        if !(tr.learning_rate > 0.0) {
            return Err(invalid("train.learning_rate", "must be positive"));
        }
        if !(tr.lambda >= 0.0) {
            return Err(invalid("train.lambda", "must be nonnegative"));
        }

        let d = &self.decode;
        if !(d.beta > 0.0) {
            return Err(invalid("decode.beta", "must be positive"));
        }
        if d.max_new_tokens == 0 {
            return Err(invalid("decode.max_new_tokens", "must be at least 1"));
        }
        if !(d.temperature > 0.0) {
            return Err(invalid("decode.temperature", "must be positive"));
        }
        if t.prompt_len + d.max_new_tokens > m.max_seq_len {
            return Err(invalid(
                "decode.max_new_tokens",
                format!(
                    "prompt_len {} + max_new_tokens {} exceeds max_seq_len {}",
                    t.prompt_len, d.max_new_tokens, m.max_seq_len
                ),
            ));
        }

        if !(2..=3).contains(&t.k) {
            return Err(invalid("task.k", "sweep grids are defined for k in {2, 3}"));
        }
        if self.sweep.num_prompts == 0 {
            return Err(invalid("sweep.num_prompts", "must be at least 1"));
        }

        let s = &self.split;
        if s.train < 0.0 || s.val < 0.0 || s.test < 0.0 {
            return Err(invalid("split.train", "fractions must be nonnegative"));
        }
        if ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "split.train",
                format!("fractions sum to {}, expected 1", s.train + s.val + s.test),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.model.vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_seq_len: self.model.max_seq_len,
            adapter: Some(AdapterSpec {
                kind: self.adapter.kind,
                config: AdapterConfig {
                    m: self.model.d_model,
                    n: self.model.d_model,
                    r1: self.adapter.r1,
                    r2: self.adapter.r2,
                },
                cores: self.task.k,
            }),
        }
    }

    /// The same architecture without adapters: the frozen base model.
    pub fn base_model_config(&self) -> ModelConfig {
        ModelConfig {
            adapter: None,
            ..self.model_config()
        }
    }

    pub fn synth_task(&self) -> SynthTaskConfig {
        SynthTaskConfig {
            k: self.task.k,
            token_classes: self.task.token_classes.clone(),
            prompt_len: self.task.prompt_len,
            response_len: self.task.response_len,
            dataset_size: self.task.dataset_size,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            beta_r: self.train.beta_r,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            lambda: self.train.lambda,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn decode_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            beta: self.decode.beta,
            max_new_tokens: self.decode.max_new_tokens,
            mode: self.decode.mode,
            temperature: self.decode.temperature,
            seed,
        }
    }

    pub fn split_fractions(&self) -> (f64, f64, f64) {
        (self.split.train, self.split.val, self.split.test)
    }

    /// Desk-scale two-objective experiment.
    pub fn default_two_objective() -> Self {
        Self {
            model: ModelSection {
                vocab_size: 64,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                max_seq_len: 64,
            },
            adapter: AdapterSection {
                kind: AdapterKind::MoSLora,
                r1: 4,
                r2: 4,
            },
            task: TaskSection {
                k: 2,
                token_classes: vec![(1..=16).collect(), (17..=32).collect()],
                prompt_len: 8,
                response_len: 16,
                dataset_size: 5000,
                descriptions: vec![
                    "favor tokens drawn from the first symbol class".into(),
                    "favor tokens drawn from the second symbol class".into(),
                ],
            },
            // Published optimizer settings; the batch is scaled down so the
            // step count stays in the thousands at desk scale.
            train: TrainSection {
                epochs: 2,
                beta_r: 0.01,
                learning_rate: 5e-4,
                batch_size: 2,
                lambda: 0.5,
            },
            decode: DecodeSection {
                beta: 1.0,
                max_new_tokens: 16,
                mode: DecodeMode::Greedy,
                temperature: 1.0,
            },
            sweep: SweepSection {
                scheme: SweepScheme::Standard,
                num_prompts: 64,
            },
            split: SplitSection {
                train: 0.8,
                val: 0.1,
                test: 0.1,
            },
            seed: 42,
            paths: None,
        }
    }

    /// Desk-scale three-objective experiment.
    pub fn default_three_objective() -> Self {
        let mut config = Self::default_two_objective();
        config.task.k = 3;
        config.task.token_classes = vec![
            (1..=10).collect(),
            (11..=20).collect(),
            (21..=30).collect(),
        ];
        config.task.descriptions = vec![
            "favor tokens drawn from the first symbol class".into(),
            "favor tokens drawn from the second symbol class".into(),
            "favor tokens drawn from the third symbol class".into(),
        ];
        config.train.epochs = 3;
        config.train.lambda = 0.2;
        config.decode.beta = 0.1;
        config.validate().expect("default config is valid");
        config
    }
}

/// Stable sub-seed derivation: hashes a tag into the base seed so each phase
/// (data, training, per-sweep-point decoding) gets an independent stream.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
