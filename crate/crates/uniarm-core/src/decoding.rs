//! Guided decoding: per-token composition of the frozen base distribution
//! with reward-model distributions.
//!
//! All composition happens in log space and is normalized by a single
//! softmax, which absorbs the partition function. Three reward shapes are
//! supported: one conditioned model, a product of per-objective models with
//! preference exponents, and the bilinear-baseline model conditioned by
//! parameter mixing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::model::{
    forward_logits_base, log_softmax_row, AdapterState, Conditioning, ModelError, ModelWeights,
    TokenSequence, EOS_TOKEN,
};
use crate::preference::{PreferenceError, PreferenceVector};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Invalid(String),
    #[error("distribution lengths differ: base {base}, reward {arm}")]
    LengthMismatch { base: usize, arm: usize },
    #[error("non-finite entry in a log-distribution")]
    NonFinite,
    #[error("checkpoint/model dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("preference has {got} components but the reward model expects {expected}")]
    KMismatch { expected: usize, got: usize },
    #[error("checkpoint is locked to a different preference vector")]
    LockMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Reward-strength divisor: the reward distribution enters with exponent
    /// 1/beta.
    pub beta: f64,
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// Sampling temperature (ignored by greedy decoding).
    pub temperature: f64,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.beta > 0.0) {
            return Err(DecodeError::Invalid(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::Invalid(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0) {
            return Err(DecodeError::Invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A normalized next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    probs: Vec<f64>,
}

impl StepDistribution {
    fn from_log_weights(log_weights: &[f64]) -> Self {
        let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = log_weights.iter().map(|&w| (w - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Sums to one within 1e-9 by construction; exposed for tests.
    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Greedy pick; ties resolve to the lowest token id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }

    /// Seeded categorical draw at the given temperature.
    pub fn sample<R: Rng>(&self, rng: &mut R, temperature: f64) -> u32 {
        let probs = if (temperature - 1.0).abs() < 1e-15 {
            self.probs.clone()
        } else {
            let logs: Vec<f64> = self
                .probs
                .iter()
                .map(|&p| p.max(f64::MIN_POSITIVE).ln() / temperature)
                .collect();
            StepDistribution::from_log_weights(&logs).probs
        };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as u32;
            }
        }
        (probs.len() - 1) as u32
    }
}

fn check_log_dist(name: &str, v: &[f64]) -> Result<(), DecodeError> {
    if v.iter().any(|x| !x.is_finite()) {
        log::debug!("non-finite entry in {name}");
        return Err(DecodeError::NonFinite);
    }
    Ok(())
}

/// `softmax(base + (1/β)·arm)`: the single-reward composition.
pub fn compose_single(
    base_logprobs: &[f64],
    arm_logprobs: &[f64],
    beta: f64,
) -> Result<StepDistribution, DecodeError> {
    if base_logprobs.len() != arm_logprobs.len() {
        return Err(DecodeError::LengthMismatch {
            base: base_logprobs.len(),
            arm: arm_logprobs.len(),
        });
    }
    check_log_dist("base", base_logprobs)?;
    check_log_dist("arm", arm_logprobs)?;
    let log_weights: Vec<f64> = base_logprobs
        .iter()
        .zip(arm_logprobs)
        .map(|(&b, &a)| b + a / beta)
        .collect();
    Ok(StepDistribution::from_log_weights(&log_weights))
}

/// `softmax(base + Σ_i (α_i/β)·arm_i)`: product of per-objective rewards.
pub fn compose_genarm(
    base_logprobs: &[f64],
    arm_logprobs: &[Vec<f64>],
    alpha: &PreferenceVector,
    beta: f64,
) -> Result<StepDistribution, DecodeError> {
    if arm_logprobs.len() != alpha.k() {
        return Err(DecodeError::KMismatch {
            expected: arm_logprobs.len(),
            got: alpha.k(),
        });
    }
    check_log_dist("base", base_logprobs)?;
    let mut log_weights = base_logprobs.to_vec();
    for (arm, &a) in arm_logprobs.iter().zip(alpha.components()) {
        if arm.len() != base_logprobs.len() {
            return Err(DecodeError::LengthMismatch {
                base: base_logprobs.len(),
                arm: arm.len(),
            });
        }
        check_log_dist("arm", arm)?;
        let coeff = a / beta;
        for (w, &l) in log_weights.iter_mut().zip(arm) {
            *w += coeff * l;
        }
    }
    Ok(StepDistribution::from_log_weights(&log_weights))
}

/// Which reward model(s) guide the base model.
#[derive(Debug, Clone, Copy)]
pub enum RewardSpec<'a> {
    /// Plain base-model decoding.
    None,
    /// One preference-conditioned reward model.
    UniArm(&'a Checkpoint),
    /// One reward model per objective, composed with preference exponents.
    /// Conditioned checkpoints are evaluated at their own vertex.
    GenArm(&'a [Checkpoint]),
    /// The bilinear baseline, conditioned by parameter mixing.
    PbLora(&'a Checkpoint),
}

// Composition happens at the distribution level, so the reward model may be
// a different size than the base model (a small guide for a large frozen
// model); only the vocabularies must agree.
fn check_compatible(base: &ModelWeights, ck: &Checkpoint) -> Result<(), DecodeError> {
    let a = &base.config;
    let b = &ck.model.config;
    if a.vocab_size != b.vocab_size {
        return Err(DecodeError::DimensionMismatch(format!(
            "base has vocabulary {}, checkpoint has {}",
            a.vocab_size, b.vocab_size
        )));
    }
    Ok(())
}

/// Longest context every involved model can score.
fn context_limit(base: &ModelWeights, spec: &RewardSpec) -> usize {
    let mut limit = base.config.max_seq_len;
    match spec {
        RewardSpec::None => {}
        RewardSpec::UniArm(ck) | RewardSpec::PbLora(ck) => {
            limit = limit.min(ck.model.config.max_seq_len);
        }
        RewardSpec::GenArm(cks) => {
            for ck in *cks {
                limit = limit.min(ck.model.config.max_seq_len);
            }
        }
    }
    limit
}

fn check_lock(ck: &Checkpoint, alpha: &PreferenceVector) -> Result<(), DecodeError> {
    if let Some(lock) = &ck.locked_alpha {
        if !lock.approx_eq(alpha, 1e-12) {
            return Err(DecodeError::LockMismatch);
        }
    }
    Ok(())
}

fn last_row_logprobs(
    model: &ModelWeights,
    tokens: &[u32],
    cond: Conditioning,
) -> Result<Vec<f64>, DecodeError> {
    let logits = crate::model::forward_logits(model, tokens, cond)?;
    let last = logits.row(logits.nrows() - 1);
    Ok(log_softmax_row(last.as_slice().expect("row is contiguous")))
}

/// The composed next-token distribution for the current context.
fn step_distribution(
    base: &ModelWeights,
    spec: &RewardSpec,
    tokens: &[u32],
    alpha: &PreferenceVector,
    beta: f64,
) -> Result<StepDistribution, DecodeError> {
    let base_logits = forward_logits_base(base, tokens)?;
    let base_row = log_softmax_row(
        base_logits
            .row(base_logits.nrows() - 1)
            .as_slice()
            .expect("row is contiguous"),
    );
    match spec {
        RewardSpec::None => Ok(StepDistribution::from_log_weights(&base_row)),
        RewardSpec::UniArm(ck) => {
            let arm_row = match ck.model.adapter_state() {
                AdapterState::Merged => last_row_logprobs(&ck.model, tokens, Conditioning::None)?,
                _ => {
                    let o = ck.mixed_preference(alpha)?;
                    last_row_logprobs(&ck.model, tokens, Conditioning::Mixed(&o))?
                }
            };
            compose_single(&base_row, &arm_row, beta)
        }
        RewardSpec::PbLora(ck) => {
            let arm_row = last_row_logprobs(&ck.model, tokens, Conditioning::Alpha(alpha))?;
            compose_single(&base_row, &arm_row, beta)
        }
        RewardSpec::GenArm(cks) => {
            let mut arms = Vec::with_capacity(cks.len());
            for (i, ck) in cks.iter().enumerate() {
                let row = match ck.model.adapter_state() {
                    AdapterState::None | AdapterState::Merged => {
                        last_row_logprobs(&ck.model, tokens, Conditioning::None)?
                    }
                    AdapterState::MoSLora => {
                        let vertex = PreferenceVector::vertex(ck.k(), i.min(ck.k() - 1));
                        let o = ck.mixed_preference(&vertex)?;
                        last_row_logprobs(&ck.model, tokens, Conditioning::Mixed(&o))?
                    }
                    AdapterState::PbLora => {
                        let vertex = PreferenceVector::vertex(ck.k(), i.min(ck.k() - 1));
                        last_row_logprobs(&ck.model, tokens, Conditioning::Alpha(&vertex))?
                    }
                };
                arms.push(row);
            }
            compose_genarm(&base_row, &arms, alpha, beta)
        }
    }
}

/// Autoregressive generation guided by the reward spec.
///
/// Greedy mode picks the argmax (ties to the lowest token id); sample mode
/// draws from the composed distribution with a seeded generator. Generation
/// stops at `max_new_tokens`, at the model's context limit, or when the
/// reserved end token is chosen (the end token is not emitted).
pub fn generate(
    base: &ModelWeights,
    spec: &RewardSpec,
    prompt: &TokenSequence,
    alpha: &PreferenceVector,
    config: &DecodeConfig,
) -> Result<TokenSequence, DecodeError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(DecodeError::Invalid("prompt must be nonempty".into()));
    }
    match spec {
        RewardSpec::None => {}
        RewardSpec::UniArm(ck) | RewardSpec::PbLora(ck) => {
            check_compatible(base, ck)?;
            check_lock(ck, alpha)?;
            let expected = match spec {
                RewardSpec::PbLora(_) => match &ck.model.config.adapter {
                    Some(s) => s.cores,
                    None => ck.k(),
                },
                _ => ck.k(),
            };
            if expected != alpha.k() {
                return Err(DecodeError::KMismatch {
                    expected,
                    got: alpha.k(),
                });
            }
        }
        RewardSpec::GenArm(cks) => {
            if cks.len() != alpha.k() {
                return Err(DecodeError::KMismatch {
                    expected: cks.len(),
                    got: alpha.k(),
                });
            }
            for ck in *cks {
                check_compatible(base, ck)?;
            }
        }
    }

    let limit = context_limit(base, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tokens = prompt.tokens.clone();
    for _ in 0..config.max_new_tokens {
        if tokens.len() >= limit {
            break;
        }
        let dist = step_distribution(base, spec, &tokens, alpha, config.beta)?;
        let next = match config.mode {
            DecodeMode::Greedy => dist.argmax(),
            DecodeMode::Sample => dist.sample(&mut rng, config.temperature),
        };
        if next == EOS_TOKEN {
            break;
        }
        tokens.push(next);
    }
    Ok(TokenSequence::response(tokens[prompt.len()..].to_vec()))
}

/// One generated response: the sweep output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: Vec<u32>,
    pub alpha: Vec<f64>,
    pub tokens: Vec<u32>,
    /// Per-objective oracle scores of the generated tokens.
    pub scores: Vec<f64>,
}

/// Newline-delimited JSON, UTF-8, LF.
pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<(), DecodeError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>, DecodeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
