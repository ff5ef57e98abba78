//! Preference-conditioned reward-model training.
//!
//! Each iteration samples one preference vector, draws one batch per
//! objective for the local loss, draws one pooled batch relabeled under the
//! sampled preference for the global loss, and takes an adaptive-moment
//! gradient step on the adapter parameters only. Base weights are frozen
//! throughout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::datasynth::{aggregate_label, PreferencePairRecord};
use crate::model::{
    backward, forward_cached, log_softmax_row, AdapterState, Conditioning, ModelError,
    ModelGrads, ModelWeights,
};
use crate::preference::{
    mix, sample_simplex_with, MixedPreference, ObjectiveEmbedding, PreferenceError,
    PreferenceVector,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("dataset for objective {0} is empty")]
    EmptyDataset(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at step {step}: combined loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("frozen-base contract violated: base weights changed during training")]
    FrozenBaseViolated,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Reward-difference sharpness in the pairwise loss.
    pub beta_r: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the global (relabeled) loss term.
    pub lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Invalid(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.beta_r >= 0.0) || !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) {
            return Err(TrainError::Invalid(
                "beta_r and lambda must be nonnegative, learning_rate positive".into(),
            ));
        }
        Ok(())
    }
}

/// One training step's losses, as written to the loss-history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub alpha: Vec<f64>,
    pub local: f64,
    pub global: f64,
    pub combined: f64,
}

/// `-log σ((-1)^z β_r (logp1 - logp2))`, computed through a stable softplus:
/// no overflow for argument magnitudes up to 1e4 and beyond.
pub fn pairwise_loss(logp1: f64, logp2: f64, z: u8, beta_r: f64) -> f64 {
    let sign = if z == 0 { 1.0 } else { -1.0 };
    let s = sign * (beta_r * (logp1 - logp2));
    softplus(-s)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss plus its derivatives with respect to the two log-probabilities.
pub fn pairwise_loss_grad(logp1: f64, logp2: f64, z: u8, beta_r: f64) -> (f64, f64, f64) {
    let sign = if z == 0 { 1.0 } else { -1.0 };
    let s = sign * (beta_r * (logp1 - logp2));
    let loss = softplus(-s);
    // dL/ds = σ(s) - 1, computed without overflow on either tail.
    let dl_ds = if s >= 0.0 {
        let e = (-s).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + s.exp())
    };
    let d1 = dl_ds * sign * beta_r;
    (loss, d1, -d1)
}

fn conditioning<'a>(
    state: AdapterState,
    alpha: &'a PreferenceVector,
    o_mixed: &'a MixedPreference,
) -> Conditioning<'a> {
    match state {
        AdapterState::MoSLora => Conditioning::Mixed(o_mixed),
        AdapterState::PbLora => Conditioning::Alpha(alpha),
        AdapterState::None | AdapterState::Merged => Conditioning::None,
    }
}

fn record_pair_log_probs(
    model: &ModelWeights,
    record: &PreferencePairRecord,
    cond: Conditioning,
) -> Result<(f64, f64), ModelError> {
    let lp1 = crate::model::sequence_log_prob(model, &record.prompt, &record.y1, cond)?;
    let lp2 = crate::model::sequence_log_prob(model, &record.prompt, &record.y2, cond)?;
    Ok((lp1, lp2))
}

/// Local loss `Σ_i α_i · mean pairwise loss over batch i`, conditioned on the
/// mixed preference for every dimension.
pub fn local_loss(
    model: &ModelWeights,
    batches: &[&[PreferencePairRecord]],
    alpha: &PreferenceVector,
    o_mixed: &MixedPreference,
    beta_r: f64,
) -> Result<f64, TrainError> {
    if batches.len() != alpha.k() {
        return Err(TrainError::Invalid(format!(
            "{} batches for {} preference dimensions",
            batches.len(),
            alpha.k()
        )));
    }
    let cond = conditioning(model.adapter_state(), alpha, o_mixed);
    let mut total = 0.0;
    for (i, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut sum = 0.0;
        for record in *batch {
            let (lp1, lp2) = record_pair_log_probs(model, record, cond)?;
            sum += pairwise_loss(lp1, lp2, record.labels[i], beta_r);
        }
        total += alpha.components()[i] * (sum / batch.len() as f64);
    }
    Ok(total)
}

/// Global loss: mean pairwise loss over the batch relabeled by the α-weighted
/// oracle scores. Tied records are skipped; an all-tie batch scores 0.
pub fn global_loss(
    model: &ModelWeights,
    batch: &[PreferencePairRecord],
    alpha: &PreferenceVector,
    o_mixed: &MixedPreference,
    beta_r: f64,
) -> Result<f64, TrainError> {
    let cond = conditioning(model.adapter_state(), alpha, o_mixed);
    let mut sum = 0.0;
    let mut used = 0usize;
    for record in batch {
        let Some(z) = aggregate_label(record, alpha).as_bit() else {
            continue;
        };
        let (lp1, lp2) = record_pair_log_probs(model, record, cond)?;
        sum += pairwise_loss(lp1, lp2, z, beta_r);
        used += 1;
    }
    if used == 0 {
        log::warn!("global loss batch was entirely tied under alpha; scoring 0");
        return Ok(0.0);
    }
    Ok(sum / used as f64)
}

/// Losses of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub local: f64,
    pub global: f64,
    pub combined: f64,
}

/// One iteration's combined loss `Σ α_i ℓ_i + λ ℓ_global` together with its
/// analytic gradients over every adapter tensor (`dim_batches` holds one
/// batch per preference dimension; the global batch is relabeled under α
/// with ties skipped).
pub fn combined_loss_with_grads(
    model: &ModelWeights,
    embeddings: &[ObjectiveEmbedding],
    dim_batches: &[&[PreferencePairRecord]],
    global_batch: &[PreferencePairRecord],
    alpha: &PreferenceVector,
    beta_r: f64,
    lambda: f64,
) -> Result<(StepLosses, ModelGrads), TrainError> {
    if dim_batches.len() != alpha.k() {
        return Err(TrainError::Invalid(format!(
            "{} batches for {} preference dimensions",
            dim_batches.len(),
            alpha.k()
        )));
    }
    let o_mixed = mix(alpha, embeddings)?;
    let cond = conditioning(model.adapter_state(), alpha, &o_mixed);
    let mut grads = ModelGrads::zeros_like(model);

    let mut local = 0.0;
    for (i, batch) in dim_batches.iter().enumerate() {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let weight_i = alpha.components()[i];
        let per_record = weight_i / batch.len() as f64;
        let mut batch_sum = 0.0;
        for record in *batch {
            let (_, _, loss, _, _) = pair_forward_backward(
                model,
                record,
                record.labels[i],
                cond,
                beta_r,
                per_record,
                &mut grads,
            )?;
            batch_sum += loss;
        }
        local += weight_i * (batch_sum / batch.len() as f64);
    }

    let mut global = 0.0;
    if lambda > 0.0 && !global_batch.is_empty() {
        let usable: Vec<(&PreferencePairRecord, u8)> = global_batch
            .iter()
            .filter_map(|r| aggregate_label(r, alpha).as_bit().map(|z| (r, z)))
            .collect();
        if usable.is_empty() {
            log::warn!("global batch entirely tied under alpha; global loss 0");
        } else {
            let per_record = lambda / usable.len() as f64;
            let mut sum = 0.0;
            for (record, z) in &usable {
                let (_, _, loss, _, _) = pair_forward_backward(
                    model, record, *z, cond, beta_r, per_record, &mut grads,
                )?;
                sum += loss;
            }
            global = sum / usable.len() as f64;
        }
    }

    let combined = local + lambda * global;
    Ok((
        StepLosses {
            local,
            global,
            combined,
        },
        grads,
    ))
}

/// Cached forward of one prompt+response, returning the summed response
/// log-probability plus everything needed to backpropagate it later.
struct SequencePass {
    logits: Array2<f64>,
    cache: crate::model::ForwardCache,
    log_softmax_rows: Vec<(usize, Vec<f64>, u32)>,
    log_prob: f64,
}

fn forward_sequence(
    model: &ModelWeights,
    prompt: &crate::model::TokenSequence,
    response: &crate::model::TokenSequence,
    cond: Conditioning,
) -> Result<SequencePass, ModelError> {
    let mut tokens = prompt.tokens.clone();
    tokens.extend_from_slice(&response.tokens);
    let (logits, cache) = forward_cached(model, &tokens, cond, true)?;
    let mut rows = Vec::with_capacity(response.len());
    let mut log_prob = 0.0;
    for (t, &target) in response.tokens.iter().enumerate() {
        let row_idx = prompt.len() - 1 + t;
        let ls = log_softmax_row(
            logits
                .row(row_idx)
                .as_slice()
                .expect("row is contiguous"),
        );
        log_prob += ls[target as usize];
        rows.push((row_idx, ls, target));
    }
    Ok(SequencePass {
        logits,
        cache,
        log_softmax_rows: rows,
        log_prob,
    })
}

/// Backpropagates `coeff · d(sum log-prob)/d logits` through a cached pass.
fn backprop_sequence(
    model: &ModelWeights,
    pass: &SequencePass,
    coeff: f64,
    grads: &mut ModelGrads,
) {
    let mut dlogits = Array2::<f64>::zeros(pass.logits.raw_dim());
    for (row_idx, ls, target) in &pass.log_softmax_rows {
        // d logp / d logits = onehot(target) - softmax(row).
        for (v, &l) in ls.iter().enumerate() {
            dlogits[(*row_idx, v)] = -coeff * l.exp();
        }
        dlogits[(*row_idx, *target as usize)] += coeff;
    }
    backward(model, &pass.cache, &dlogits, grads);
}

struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
}

impl AdamState {
    fn new(model: &ModelWeights) -> Self {
        let mut m = Vec::new();
        model.visit_adapter_tensors(&mut |w| m.push(Array2::zeros(w.raw_dim())));
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    fn step(&mut self, model: &mut ModelWeights, grads: &ModelGrads, cfg: &TrainConfig) {
        self.t += 1;
        let mut flat_grads: Vec<&Array2<f64>> = Vec::with_capacity(self.m.len());
        grads.visit_tensors(&mut |g| flat_grads.push(g));
        debug_assert_eq!(flat_grads.len(), self.m.len());
        let (b1, b2, eps) = (cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut idx = 0;
        model.visit_adapter_tensors_mut(&mut |w| {
            let g = flat_grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((w, &g), (m, v)) in w
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Runs the training loop over the checkpoint's adapter parameters.
///
/// `datasets` holds one record set per preference dimension (they may alias
/// the same underlying pairs). Per iteration: sample α, draw one batch per
/// dimension for the local loss, draw one pooled batch relabeled under α for
/// the global loss, combine as `local + λ·global`, and update Θ. Deterministic
/// per seed; aborts if the combined loss turns non-finite.
pub fn train(
    checkpoint: &mut Checkpoint,
    datasets: &[&[PreferencePairRecord]],
    config: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    config.validate()?;
    let k = checkpoint.k();
    if datasets.len() != k {
        return Err(TrainError::Invalid(format!(
            "{} datasets for {k} objectives",
            datasets.len()
        )));
    }
    if k < 2 {
        return Err(TrainError::Invalid(
            "training needs at least 2 objectives".into(),
        ));
    }
    match checkpoint.model.adapter_state() {
        AdapterState::MoSLora | AdapterState::PbLora => {}
        other => {
            return Err(TrainError::Invalid(format!(
                "checkpoint has no trainable adapter (state {other:?})"
            )))
        }
    }
    for (i, d) in datasets.iter().enumerate() {
        if d.is_empty() {
            return Err(TrainError::EmptyDataset(i));
        }
    }

    let base_checksum = checkpoint.model.base_checksum();
    let min_len = datasets.iter().map(|d| d.len()).min().expect("k >= 2");
    let steps_per_epoch = (min_len / config.batch_size).max(1);
    let total_steps = config.epochs * steps_per_epoch;
    let pooled_len: usize = datasets.iter().map(|d| d.len()).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&checkpoint.model);
    let mut history = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let alpha = sample_simplex_with(k, &mut rng)?;

        // One batch per preference dimension, then one pooled batch for the
        // relabeled global term. Sampling is with replacement.
        let dim_batches: Vec<Vec<PreferencePairRecord>> = (0..k)
            .map(|i| {
                (0..config.batch_size)
                    .map(|_| datasets[i][rng.gen_range(0..datasets[i].len())].clone())
                    .collect()
            })
            .collect();
        let global_batch: Vec<PreferencePairRecord> = if config.lambda > 0.0 {
            (0..config.batch_size)
                .map(|_| {
                    let mut idx = rng.gen_range(0..pooled_len);
                    let mut ds = 0;
                    while idx >= datasets[ds].len() {
                        idx -= datasets[ds].len();
                        ds += 1;
                    }
                    datasets[ds][idx].clone()
                })
                .collect()
        } else {
            Vec::new()
        };

        let batch_refs: Vec<&[PreferencePairRecord]> =
            dim_batches.iter().map(Vec::as_slice).collect();
        let (losses, grads) = combined_loss_with_grads(
            &checkpoint.model,
            &checkpoint.embeddings,
            &batch_refs,
            &global_batch,
            &alpha,
            config.beta_r,
            config.lambda,
        )?;
        if !losses.combined.is_finite() {
            return Err(TrainError::Diverged {
                step,
                loss: losses.combined,
            });
        }

        adam.step(&mut checkpoint.model, &grads, config);
        history.push(LossRecord {
            step,
            alpha: alpha.components().to_vec(),
            local: losses.local,
            global: losses.global,
            combined: losses.combined,
        });
    }

    if checkpoint.model.base_checksum() != base_checksum {
        return Err(TrainError::FrozenBaseViolated);
    }
    checkpoint.train_seed = config.seed;
    checkpoint.step_count += total_steps as u64;
    Ok(history)
}

/// Computes the pairwise loss of one record and backpropagates both response
/// sequences with the given per-record weight. Returns
/// `(lp1, lp2, loss, d1, d2)`.
fn pair_forward_backward(
    model: &ModelWeights,
    record: &PreferencePairRecord,
    z: u8,
    cond: Conditioning,
    beta_r: f64,
    weight: f64,
    grads: &mut ModelGrads,
) -> Result<(f64, f64, f64, f64, f64), TrainError> {
    let pass1 = forward_sequence(model, &record.prompt, &record.y1, cond)?;
    let pass2 = forward_sequence(model, &record.prompt, &record.y2, cond)?;
    let (loss, d1, d2) = pairwise_loss_grad(pass1.log_prob, pass2.log_prob, z, beta_r);
    backprop_sequence(model, &pass1, weight * d1, grads);
    backprop_sequence(model, &pass2, weight * d2, grads);
    Ok((pass1.log_prob, pass2.log_prob, loss, d1, d2))
}

/// Loss history CSV: `step, alpha components, local, global, combined`.
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<(), TrainError> {
    let mut out = BufWriter::new(File::create(path)?);
    let k = history.first().map(|r| r.alpha.len()).unwrap_or(0);
    let alpha_cols: Vec<String> = (0..k).map(|i| format!("alpha_{i}")).collect();
    writeln!(out, "step,{},local,global,combined", alpha_cols.join(","))?;
    for r in history {
        let alphas: Vec<String> = r.alpha.iter().map(|a| a.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            alphas.join(","),
            r.local,
            r.global,
            r.combined
        )?;
    }
    out.flush()?;
    Ok(())
}
