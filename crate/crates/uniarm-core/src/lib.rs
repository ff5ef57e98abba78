//! Unified preference-conditioned autoregressive reward modeling at desk scale.
//!
//! The crate trains a small reward model whose low-rank adapters are modulated
//! by a mixed preference vector, uses it to guide a frozen base model at
//! decoding time, and evaluates the resulting trade-off fronts with
//! multi-objective metrics (hypervolume, mean inner product).
//!
//! Module map:
//! - [`adapter`] — modulated/shared low-rank adapters, the bilinear baseline,
//!   parameter counting, and exact inference-time merging.
//! - [`model`] — a tiny causal transformer serving as both the frozen base
//!   model and the adapted reward model.
//! - [`preference`] — simplex vectors, objective embeddings, mixing, sampling,
//!   and sweep grids.
//! - [`datasynth`] — synthetic multi-objective preference pairs with
//!   programmatic oracle scorers.
//! - [`training`] — the pairwise preference loss and the local+global
//!   training loop over adapter parameters.
//! - [`decoding`] — per-token composition of base and reward distributions,
//!   greedy and sampled generation.
//! - [`metrics`] — Pareto filtering, exact and Monte-Carlo hypervolume, mean
//!   inner product.
//! - [`checkpoint`] — versioned binary serialization of model, adapters, and
//!   objective embeddings.
//! - [`config`] — the experiment configuration document shared by all CLI
//!   commands.

// Validation uses `!(x >= 0.0)`-style comparisons on purpose: the negated
// form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod datasynth;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod preference;
pub mod training;

pub use adapter::{AdapterConfig, AdapterKind, MergedLayer, MoSLoraWeights, PbLoraWeights};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use datasynth::{PreferencePairRecord, SynthTaskConfig};
pub use decoding::{DecodeConfig, DecodeMode, RewardSpec, StepDistribution};
pub use metrics::{ParetoPoint, ReferencePoint};
pub use model::{ModelConfig, ModelWeights, TokenSequence};
pub use preference::{MixedPreference, ObjectiveEmbedding, PreferenceVector};
pub use training::TrainConfig;
