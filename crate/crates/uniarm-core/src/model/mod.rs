//! A tiny causal transformer.
//!
//! The same weights serve two roles: with adapters ignored they are the
//! frozen base model; with adapters active on the Q/K/V projections they are
//! the preference-conditioned reward model. Sequence reward is the sum of
//! response-token log-probabilities.

mod backward;
mod forward;

pub use backward::{backward, LayerAdapterGrads, ModelGrads, ProjGrads};
pub use forward::{forward_cached, ForwardCache};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    self, AdapterConfig, AdapterError, AdapterKind, MergedLayer, MoSLoraWeights, PbLoraWeights,
};
use crate::preference::{MixedPreference, PreferenceVector};

/// Reserved end-of-sequence token; never appears inside synthetic data.
pub const EOS_TOKEN: u32 = 0;

/// LayerNorm epsilon.
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} at position {index} is outside the vocabulary ({vocab})")]
    TokenOutOfRange {
        index: usize,
        token: u32,
        vocab: usize,
    },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence where at least one token is required")]
    EmptySequence,
    #[error("adapter expects {expected} conditioning, got {got}")]
    ConditioningMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("model has no merged layers to build from / cannot merge: {0}")]
    MergeUnsupported(String),
}

/// Which adapter family is attached to the Q/K/V projections, with its
/// dimensions; `cores` is the number of preference-specific core tensors and
/// is only consulted by the bilinear kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub config: AdapterConfig,
    pub cores: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub adapter: Option<AdapterSpec>,
}

impl ModelConfig {
    /// Desk-scale defaults: minutes-scale CPU training.
    pub fn desk_scale() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            adapter: None,
        }
    }

    pub fn with_adapter(mut self, spec: AdapterSpec) -> Self {
        self.adapter = Some(spec);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig(
                "vocab_size must be at least 2".into(),
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(ModelError::InvalidConfig(
                "n_layers and max_seq_len must be positive".into(),
            ));
        }
        if let Some(spec) = &self.adapter {
            if spec.config.m != self.d_model || spec.config.n != self.d_model {
                return Err(ModelError::InvalidConfig(format!(
                    "adapter dimensions {}x{} must equal d_model {}",
                    spec.config.m, spec.config.n, self.d_model
                )));
            }
            spec.config.validate()?;
            if spec.kind == AdapterKind::PbLora && spec.cores == 0 {
                return Err(ModelError::InvalidConfig(
                    "bilinear adapter needs at least one core tensor".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Role marker for token sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceRole {
    Prompt,
    Response,
}

/// A run of abstract integer tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub role: SequenceRole,
}

impl TokenSequence {
    pub fn prompt(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            role: SequenceRole::Prompt,
        }
    }

    pub fn response(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            role: SequenceRole::Response,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Conditioning input for a forward pass; must match the attached adapter.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    None,
    Mixed(&'a MixedPreference),
    Alpha(&'a PreferenceVector),
}

impl Conditioning<'_> {
    fn name(&self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Mixed(_) => "mixed preference",
            Conditioning::Alpha(_) => "preference vector",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// m×n weight; forward maps row vectors of length n to length m.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub(crate) fn forward_seq(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut out = h.dot(&self.weight.t());
        out += &self.bias;
        out
    }
}

/// Adapter state of one adapted projection.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionAdapter {
    None,
    MoSLora(MoSLoraWeights),
    PbLora(PbLoraWeights),
    /// Collapsed affine map; replaces the base weight in forward passes.
    Merged(MergedLayer),
}

/// A linear projection with an optional adapter attached.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub adapter: ProjectionAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: AdaptedLinear,
    pub k: AdaptedLinear,
    pub v: AdaptedLinear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormWeights,
    pub attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// vocab_size × d_model.
    pub tok_emb: Array2<f64>,
    /// max_seq_len × d_model.
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub ln_f: LayerNormWeights,
    /// d_model × vocab_size.
    pub unembed: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn linear_init(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Linear {
    Linear {
        weight: normal_matrix(rng, m, n, 1.0 / (n as f64).sqrt()),
        bias: Array1::zeros(m),
    }
}

fn ln_init(d: usize) -> LayerNormWeights {
    LayerNormWeights {
        gamma: Array1::ones(d),
        beta: Array1::zeros(d),
    }
}

impl ModelWeights {
    /// Random base weights plus freshly initialized adapters (if configured).
    /// Deterministic per seed.
    ///
    /// Base tensors and adapter tensors draw from separate seeded streams, so
    /// the base model is identical for the same seed whether or not adapters
    /// are attached.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x61ad_a97e_5eed_0001);
        let d = config.d_model;
        let tok_emb = normal_matrix(&mut rng, config.vocab_size, d, 0.1);
        let pos_emb = normal_matrix(&mut rng, config.max_seq_len, d, 0.1);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut projection = || -> Result<AdaptedLinear, ModelError> {
                let base = linear_init(&mut rng, d, d);
                let adapter = match &config.adapter {
                    None => ProjectionAdapter::None,
                    Some(spec) => {
                        let sub_seed = adapter_rng.gen::<u64>();
                        match spec.kind {
                            AdapterKind::MoSLora => ProjectionAdapter::MoSLora(
                                adapter::init_moslora(&spec.config, sub_seed)?,
                            ),
                            AdapterKind::PbLora => ProjectionAdapter::PbLora(
                                adapter::init_pblora(&spec.config, spec.cores, sub_seed)?,
                            ),
                        }
                    }
                };
                Ok(AdaptedLinear { base, adapter })
            };
            let q = projection()?;
            let k = projection()?;
            let v = projection()?;
            let out = linear_init(&mut rng, d, d);
            layers.push(LayerWeights {
                ln1: ln_init(d),
                attn: AttentionWeights { q, k, v, out },
                ln2: ln_init(d),
                mlp: MlpWeights {
                    up: linear_init(&mut rng, config.mlp_dim(), d),
                    down: linear_init(&mut rng, d, config.mlp_dim()),
                },
            });
        }
        let ln_f = ln_init(d);
        let unembed = normal_matrix(&mut rng, d, config.vocab_size, 1.0 / (d as f64).sqrt());
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            unembed,
        })
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for (index, &token) in tokens.iter().enumerate() {
            if token as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    index,
                    token,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn check_conditioning(&self, cond: &Conditioning) -> Result<(), ModelError> {
        let expected = match self.adapter_state() {
            AdapterState::None | AdapterState::Merged => "none",
            AdapterState::MoSLora => "mixed preference",
            AdapterState::PbLora => "preference vector",
        };
        if expected != cond.name() {
            return Err(ModelError::ConditioningMismatch {
                expected,
                got: cond.name(),
            });
        }
        Ok(())
    }

    /// What the adapted projections currently hold.
    pub fn adapter_state(&self) -> AdapterState {
        match self.layers.first().map(|l| &l.attn.q.adapter) {
            None | Some(ProjectionAdapter::None) => AdapterState::None,
            Some(ProjectionAdapter::MoSLora(_)) => AdapterState::MoSLora,
            Some(ProjectionAdapter::PbLora(_)) => AdapterState::PbLora,
            Some(ProjectionAdapter::Merged(_)) => AdapterState::Merged,
        }
    }

    /// Total scalar entries across all attached adapter tensors.
    pub fn adapter_param_count(&self) -> usize {
        let mut total = 0;
        for layer in &self.layers {
            for proj in [&layer.attn.q, &layer.attn.k, &layer.attn.v] {
                total += match &proj.adapter {
                    ProjectionAdapter::None | ProjectionAdapter::Merged(_) => 0,
                    ProjectionAdapter::MoSLora(w) => w.entry_count(),
                    ProjectionAdapter::PbLora(w) => w.entry_count(),
                };
            }
        }
        total
    }

    /// Visits every trainable adapter tensor in a fixed order.
    pub fn visit_adapter_tensors_mut(&mut self, f: &mut impl FnMut(&mut Array2<f64>)) {
        for layer in &mut self.layers {
            for proj in [
                &mut layer.attn.q.adapter,
                &mut layer.attn.k.adapter,
                &mut layer.attn.v.adapter,
            ] {
                match proj {
                    ProjectionAdapter::None | ProjectionAdapter::Merged(_) => {}
                    ProjectionAdapter::MoSLora(w) => w.visit_tensors_mut(f),
                    ProjectionAdapter::PbLora(w) => w.visit_tensors_mut(f),
                }
            }
        }
    }

    pub fn visit_adapter_tensors(&self, f: &mut impl FnMut(&Array2<f64>)) {
        for layer in &self.layers {
            for proj in [&layer.attn.q.adapter, &layer.attn.k.adapter, &layer.attn.v.adapter] {
                match proj {
                    ProjectionAdapter::None | ProjectionAdapter::Merged(_) => {}
                    ProjectionAdapter::MoSLora(w) => w.visit_tensors(f),
                    ProjectionAdapter::PbLora(w) => w.visit_tensors(f),
                }
            }
        }
    }

    /// Visits every base (non-adapter) tensor's bytes in a fixed order.
    fn visit_base_bytes(&self, f: &mut impl FnMut(&[u8])) {
        let emit1 = |arr: &Array1<f64>, f: &mut dyn FnMut(&[u8])| {
            for v in arr.iter() {
                f(&v.to_le_bytes());
            }
        };
        let emit2 = |arr: &Array2<f64>, f: &mut dyn FnMut(&[u8])| {
            for v in arr.iter() {
                f(&v.to_le_bytes());
            }
        };
        emit2(&self.tok_emb, f);
        emit2(&self.pos_emb, f);
        for layer in &self.layers {
            emit1(&layer.ln1.gamma, f);
            emit1(&layer.ln1.beta, f);
            for proj in [&layer.attn.q, &layer.attn.k, &layer.attn.v] {
                emit2(&proj.base.weight, f);
                emit1(&proj.base.bias, f);
            }
            emit2(&layer.attn.out.weight, f);
            emit1(&layer.attn.out.bias, f);
            emit1(&layer.ln2.gamma, f);
            emit1(&layer.ln2.beta, f);
            emit2(&layer.mlp.up.weight, f);
            emit1(&layer.mlp.up.bias, f);
            emit2(&layer.mlp.down.weight, f);
            emit1(&layer.mlp.down.bias, f);
        }
        emit1(&self.ln_f.gamma, f);
        emit1(&self.ln_f.beta, f);
        emit2(&self.unembed, f);
    }

    /// FNV-1a checksum over all base tensors; adapters are excluded, so a
    /// training run that honors the frozen-base contract leaves it unchanged.
    pub fn base_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit_base_bytes(&mut |bytes| {
            for &b in bytes {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        });
        hash
    }

    /// Replaces every modulated adapter by its merged affine map for a fixed
    /// mixed preference. The result needs no conditioning input.
    pub fn merge_adapters(&self, o_mixed: &MixedPreference) -> Result<ModelWeights, ModelError> {
        if self.adapter_state() != AdapterState::MoSLora {
            return Err(ModelError::MergeUnsupported(format!(
                "only modulated adapters merge; model holds {:?}",
                self.adapter_state()
            )));
        }
        let mut merged = self.clone();
        for layer in &mut merged.layers {
            for proj in [
                &mut layer.attn.q,
                &mut layer.attn.k,
                &mut layer.attn.v,
            ] {
                if let ProjectionAdapter::MoSLora(w) = &proj.adapter {
                    let collapsed =
                        adapter::merge(w, &proj.base.weight, &proj.base.bias, &o_mixed.vector)?;
                    proj.adapter = ProjectionAdapter::Merged(collapsed);
                }
            }
        }
        Ok(merged)
    }
}

/// Summary of the adapter state shared by all adapted projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterState {
    None,
    MoSLora,
    PbLora,
    Merged,
}

/// Row-wise log-softmax.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - log_z).collect()
}

/// Unnormalized next-token logits for every position.
///
/// Row `t` holds the logits predicting the token at position `t + 1` under a
/// strict causal mask.
pub fn forward_logits(
    weights: &ModelWeights,
    tokens: &[u32],
    cond: Conditioning,
) -> Result<Array2<f64>, ModelError> {
    let (logits, _) = forward::forward_cached(weights, tokens, cond, true)?;
    Ok(logits)
}

/// Forward pass ignoring every adapter: the frozen base model.
pub fn forward_logits_base(
    weights: &ModelWeights,
    tokens: &[u32],
) -> Result<Array2<f64>, ModelError> {
    let (logits, _) = forward::forward_cached(weights, tokens, Conditioning::None, false)?;
    Ok(logits)
}

/// Sequence reward: sum of response-token log-probabilities given the prompt.
/// Prompt tokens are excluded from the sum.
pub fn sequence_log_prob(
    weights: &ModelWeights,
    prompt: &TokenSequence,
    response: &TokenSequence,
    cond: Conditioning,
) -> Result<f64, ModelError> {
    if response.is_empty() {
        return Ok(0.0);
    }
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let mut tokens = prompt.tokens.clone();
    tokens.extend_from_slice(&response.tokens);
    let logits = forward_logits(weights, &tokens, cond)?;
    let mut total = 0.0;
    for (t, &target) in response.tokens.iter().enumerate() {
        let row = logits.row(prompt.len() - 1 + t);
        let ls = log_softmax_row(row.as_slice().expect("row is contiguous"));
        total += ls[target as usize];
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
