//! Versioned checkpoint container.
//!
//! Layout: 4-byte magic, u32 format version, u64 header length, a JSON
//! header (configs, seeds, tensor manifest), then raw little-endian f64
//! tensor blocks in manifest order. The header is diff-able, the blocks are
//! exact, and save → load → save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{MergedLayer, MoSLoraWeights, PbLoraWeights};
use crate::model::{
    AdapterState, ModelConfig, ModelError, ModelWeights, ProjectionAdapter,
};
use crate::preference::{mix, MixedPreference, ObjectiveEmbedding, PreferenceError, PreferenceVector};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"UARM";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error("cannot merge: {0}")]
    MergeUnsupported(String),
}

/// A trained (or fresh) reward model together with everything needed to
/// condition and evaluate it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelWeights,
    pub embeddings: Vec<ObjectiveEmbedding>,
    pub train_seed: u64,
    pub step_count: u64,
    /// Present on merged checkpoints: the preference they are locked to.
    pub locked_alpha: Option<PreferenceVector>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    adapter_state: String,
    objective_descriptions: Vec<String>,
    train_seed: u64,
    step_count: u64,
    locked_alpha: Option<Vec<f64>>,
    tensors: Vec<TensorEntry>,
}

/// Accumulates named tensors into one contiguous blob.
struct TensorWriter {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl TensorWriter {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: impl Iterator<Item = f64>) {
        let offset = self.data.len() as u64;
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name,
            shape,
            offset,
        });
    }

    fn push1(&mut self, name: &str, arr: &Array1<f64>) {
        self.push(name.to_string(), vec![arr.len()], arr.iter().copied());
    }

    fn push2(&mut self, name: &str, arr: &Array2<f64>) {
        self.push(
            name.to_string(),
            vec![arr.nrows(), arr.ncols()],
            arr.iter().copied(),
        );
    }
}

/// Reads tensors back in manifest order, validating names and shapes.
struct TensorReader<'a> {
    entries: &'a [TensorEntry],
    data: &'a [u8],
    cursor: usize,
}

impl<'a> TensorReader<'a> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>, CheckpointError> {
        let entry = self.entries.get(self.cursor).ok_or_else(|| {
            CheckpointError::Corrupt(format!("missing tensor {name} in manifest"))
        })?;
        self.cursor += 1;
        if entry.name != name {
            return Err(CheckpointError::Corrupt(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        if entry.shape != shape {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name}: expected shape {shape:?}, found {:?}",
                entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        let bytes = self
            .data
            .get(start..end)
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} out of bounds")))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect())
    }

    fn take1(&mut self, name: &str, len: usize) -> Result<Array1<f64>, CheckpointError> {
        Ok(Array1::from_vec(self.take(name, &[len])?))
    }

    fn take2(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>, CheckpointError> {
        let v = self.take(name, &[rows, cols])?;
        Array2::from_shape_vec((rows, cols), v)
            .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))
    }

    fn finish(&self) -> Result<(), CheckpointError> {
        if self.cursor != self.entries.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} unexpected trailing tensors in manifest",
                self.entries.len() - self.cursor
            )));
        }
        Ok(())
    }
}

fn adapter_state_tag(state: AdapterState) -> &'static str {
    match state {
        AdapterState::None => "none",
        AdapterState::MoSLora => "moslora",
        AdapterState::PbLora => "pblora",
        AdapterState::Merged => "merged",
    }
}

fn write_projection(w: &mut TensorWriter, prefix: &str, proj: &crate::model::AdaptedLinear) {
    w.push2(&format!("{prefix}.weight"), &proj.base.weight);
    w.push1(&format!("{prefix}.bias"), &proj.base.bias);
    match &proj.adapter {
        ProjectionAdapter::None => {}
        ProjectionAdapter::MoSLora(a) => {
            w.push2(&format!("{prefix}.adapter.a1"), &a.a1);
            w.push2(&format!("{prefix}.adapter.w1"), &a.w1);
            w.push2(&format!("{prefix}.adapter.b1"), &a.b1);
            w.push2(&format!("{prefix}.adapter.a2"), &a.a2);
            w.push2(&format!("{prefix}.adapter.b2"), &a.b2);
            w.push2(&format!("{prefix}.adapter.w_gamma"), &a.w_gamma);
            w.push2(&format!("{prefix}.adapter.w_eta"), &a.w_eta);
        }
        ProjectionAdapter::PbLora(a) => {
            w.push2(&format!("{prefix}.adapter.a1"), &a.a1);
            w.push2(&format!("{prefix}.adapter.w1"), &a.w1);
            w.push2(&format!("{prefix}.adapter.b1"), &a.b1);
            w.push2(&format!("{prefix}.adapter.a2"), &a.a2);
            w.push2(&format!("{prefix}.adapter.b2"), &a.b2);
            for (j, core) in a.w2.iter().enumerate() {
                w.push2(&format!("{prefix}.adapter.w2.{j}"), core);
            }
        }
        ProjectionAdapter::Merged(m) => {
            w.push2(&format!("{prefix}.merged.w_tilde"), &m.w_tilde);
            w.push1(&format!("{prefix}.merged.b_prime"), &m.b_prime);
        }
    }
}

fn read_projection(
    r: &mut TensorReader,
    prefix: &str,
    config: &ModelConfig,
    state: AdapterState,
) -> Result<crate::model::AdaptedLinear, CheckpointError> {
    let d = config.d_model;
    let base = crate::model::Linear {
        weight: r.take2(&format!("{prefix}.weight"), d, d)?,
        bias: r.take1(&format!("{prefix}.bias"), d)?,
    };
    let adapter = match state {
        AdapterState::None => ProjectionAdapter::None,
        AdapterState::Merged => ProjectionAdapter::Merged(MergedLayer {
            w_tilde: r.take2(&format!("{prefix}.merged.w_tilde"), d, d)?,
            b_prime: r.take1(&format!("{prefix}.merged.b_prime"), d)?,
        }),
        AdapterState::MoSLora => {
            let spec = config.adapter.as_ref().ok_or_else(|| {
                CheckpointError::Corrupt("adapter tensors without adapter config".into())
            })?;
            let (r1, r2) = (spec.config.r1, spec.config.r2);
            ProjectionAdapter::MoSLora(MoSLoraWeights {
                a1: r.take2(&format!("{prefix}.adapter.a1"), r1, d)?,
                w1: r.take2(&format!("{prefix}.adapter.w1"), r1, r1)?,
                b1: r.take2(&format!("{prefix}.adapter.b1"), d, r1)?,
                a2: r.take2(&format!("{prefix}.adapter.a2"), r2, d)?,
                b2: r.take2(&format!("{prefix}.adapter.b2"), d, r2)?,
                w_gamma: r.take2(&format!("{prefix}.adapter.w_gamma"), r2, r2)?,
                w_eta: r.take2(&format!("{prefix}.adapter.w_eta"), r2, r2)?,
            })
        }
        AdapterState::PbLora => {
            let spec = config.adapter.as_ref().ok_or_else(|| {
                CheckpointError::Corrupt("adapter tensors without adapter config".into())
            })?;
            let (r1, r2) = (spec.config.r1, spec.config.r2);
            let mut w = PbLoraWeights {
                a1: r.take2(&format!("{prefix}.adapter.a1"), r1, d)?,
                w1: r.take2(&format!("{prefix}.adapter.w1"), r1, r1)?,
                b1: r.take2(&format!("{prefix}.adapter.b1"), d, r1)?,
                a2: r.take2(&format!("{prefix}.adapter.a2"), r2, d)?,
                b2: r.take2(&format!("{prefix}.adapter.b2"), d, r2)?,
                w2: Vec::new(),
            };
            for j in 0..spec.cores {
                w.w2.push(r.take2(&format!("{prefix}.adapter.w2.{j}"), r2, r2)?);
            }
            ProjectionAdapter::PbLora(w)
        }
    };
    Ok(crate::model::AdaptedLinear { base, adapter })
}

impl Checkpoint {
    /// A fresh, untrained checkpoint for a given model seed.
    pub fn fresh(
        config: &ModelConfig,
        descriptions: &[&str],
        seed: u64,
    ) -> Result<Self, CheckpointError> {
        let model = ModelWeights::init(config, seed)?;
        let embeddings = descriptions
            .iter()
            .map(|d| crate::preference::embed_objective(d, &model.tok_emb))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            model,
            embeddings,
            train_seed: seed,
            step_count: 0,
            locked_alpha: None,
        })
    }

    pub fn k(&self) -> usize {
        self.embeddings.len()
    }

    /// Mixes this checkpoint's objective embeddings under `alpha`.
    pub fn mixed_preference(
        &self,
        alpha: &PreferenceVector,
    ) -> Result<MixedPreference, PreferenceError> {
        mix(alpha, &self.embeddings)
    }

    /// Collapses every modulated adapter for `alpha` and locks the result.
    pub fn merge(&self, alpha: &PreferenceVector) -> Result<Checkpoint, CheckpointError> {
        if self.locked_alpha.is_some() {
            return Err(CheckpointError::MergeUnsupported(
                "checkpoint is already merged".into(),
            ));
        }
        let o = self.mixed_preference(alpha)?;
        let model = self.model.merge_adapters(&o)?;
        Ok(Checkpoint {
            model,
            embeddings: self.embeddings.clone(),
            train_seed: self.train_seed,
            step_count: self.step_count,
            locked_alpha: Some(alpha.clone()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut tw = TensorWriter::new();
        let model = &self.model;
        tw.push2("tok_emb", &model.tok_emb);
        tw.push2("pos_emb", &model.pos_emb);
        for (i, layer) in model.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            tw.push1(&format!("{p}.ln1.gamma"), &layer.ln1.gamma);
            tw.push1(&format!("{p}.ln1.beta"), &layer.ln1.beta);
            write_projection(&mut tw, &format!("{p}.attn.q"), &layer.attn.q);
            write_projection(&mut tw, &format!("{p}.attn.k"), &layer.attn.k);
            write_projection(&mut tw, &format!("{p}.attn.v"), &layer.attn.v);
            tw.push2(&format!("{p}.attn.out.weight"), &layer.attn.out.weight);
            tw.push1(&format!("{p}.attn.out.bias"), &layer.attn.out.bias);
            tw.push1(&format!("{p}.ln2.gamma"), &layer.ln2.gamma);
            tw.push1(&format!("{p}.ln2.beta"), &layer.ln2.beta);
            tw.push2(&format!("{p}.mlp.up.weight"), &layer.mlp.up.weight);
            tw.push1(&format!("{p}.mlp.up.bias"), &layer.mlp.up.bias);
            tw.push2(&format!("{p}.mlp.down.weight"), &layer.mlp.down.weight);
            tw.push1(&format!("{p}.mlp.down.bias"), &layer.mlp.down.bias);
        }
        tw.push1("ln_f.gamma", &model.ln_f.gamma);
        tw.push1("ln_f.beta", &model.ln_f.beta);
        tw.push2("unembed", &model.unembed);
        if !self.embeddings.is_empty() {
            let d = model.config.d_model;
            tw.push(
                "objective_embeddings".to_string(),
                vec![self.embeddings.len(), d],
                self.embeddings.iter().flat_map(|e| e.vector.iter().copied()),
            );
        }

        let header = Header {
            format_version: FORMAT_VERSION,
            model_config: model.config.clone(),
            adapter_state: adapter_state_tag(model.adapter_state()).to_string(),
            objective_descriptions: self
                .embeddings
                .iter()
                .map(|e| e.description.clone())
                .collect(),
            train_seed: self.train_seed,
            step_count: self.step_count,
            locked_alpha: self
                .locked_alpha
                .as_ref()
                .map(|a| a.components().to_vec()),
            tensors: tw.entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        out.write_all(&tw.data)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut file = File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let header_len = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16 + header_len;
        if buf.len() < header_end {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&buf[16..header_end])?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: header.format_version,
            });
        }
        let config = header.model_config.clone();
        config.validate()?;
        let data = &buf[header_end..];
        let mut r = TensorReader {
            entries: &header.tensors,
            data,
            cursor: 0,
        };

        let state = match header.adapter_state.as_str() {
            "none" => AdapterState::None,
            "moslora" => AdapterState::MoSLora,
            "pblora" => AdapterState::PbLora,
            "merged" => AdapterState::Merged,
            other => {
                return Err(CheckpointError::Corrupt(format!(
                    "unknown adapter state {other}"
                )))
            }
        };

        let d = config.d_model;
        let tok_emb = r.take2("tok_emb", config.vocab_size, d)?;
        let pos_emb = r.take2("pos_emb", config.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            let ln1 = crate::model::LayerNormWeights {
                gamma: r.take1(&format!("{p}.ln1.gamma"), d)?,
                beta: r.take1(&format!("{p}.ln1.beta"), d)?,
            };
            let q = read_projection(&mut r, &format!("{p}.attn.q"), &config, state)?;
            let k = read_projection(&mut r, &format!("{p}.attn.k"), &config, state)?;
            let v = read_projection(&mut r, &format!("{p}.attn.v"), &config, state)?;
            let out = crate::model::Linear {
                weight: r.take2(&format!("{p}.attn.out.weight"), d, d)?,
                bias: r.take1(&format!("{p}.attn.out.bias"), d)?,
            };
            let ln2 = crate::model::LayerNormWeights {
                gamma: r.take1(&format!("{p}.ln2.gamma"), d)?,
                beta: r.take1(&format!("{p}.ln2.beta"), d)?,
            };
            let mlp = crate::model::MlpWeights {
                up: crate::model::Linear {
                    weight: r.take2(&format!("{p}.mlp.up.weight"), config.mlp_dim(), d)?,
                    bias: r.take1(&format!("{p}.mlp.up.bias"), config.mlp_dim())?,
                },
                down: crate::model::Linear {
                    weight: r.take2(&format!("{p}.mlp.down.weight"), d, config.mlp_dim())?,
                    bias: r.take1(&format!("{p}.mlp.down.bias"), d)?,
                },
            };
            layers.push(crate::model::LayerWeights {
                ln1,
                attn: crate::model::AttentionWeights { q, k, v, out },
                ln2,
                mlp,
            });
        }
        let ln_f = crate::model::LayerNormWeights {
            gamma: r.take1("ln_f.gamma", d)?,
            beta: r.take1("ln_f.beta", d)?,
        };
        let unembed = r.take2("unembed", d, config.vocab_size)?;
        let k_obj = header.objective_descriptions.len();
        let embeddings = if k_obj > 0 {
            let flat = r.take2("objective_embeddings", k_obj, d)?;
            header
                .objective_descriptions
                .iter()
                .enumerate()
                .map(|(i, desc)| ObjectiveEmbedding {
                    vector: flat.row(i).to_owned(),
                    description: desc.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        r.finish()?;

        let locked_alpha = header
            .locked_alpha
            .map(PreferenceVector::new)
            .transpose()?;

        Ok(Checkpoint {
            model: ModelWeights {
                config,
                tok_emb,
                pos_emb,
                layers,
                ln_f,
                unembed,
            },
            embeddings,
            train_seed: header.train_seed,
            step_count: header.step_count,
            locked_alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterConfig, AdapterKind};
    use crate::model::AdapterSpec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn adapted_config(kind: AdapterKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            adapter: Some(AdapterSpec {
                kind,
                config: AdapterConfig {
                    m: 16,
                    n: 16,
                    r1: 2,
                    r2: 2,
                },
                cores: 2,
            }),
        }
    }

    fn randomized_checkpoint(kind: AdapterKind, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::fresh(&adapted_config(kind), &["one", "two"], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ck.model.visit_adapter_tensors_mut(&mut |t| {
            for v in t.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        });
        ck.step_count = 123;
        ck
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for kind in [AdapterKind::MoSLora, AdapterKind::PbLora] {
            let ck = randomized_checkpoint(kind, 5);
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.ckpt");
            let p2 = dir.path().join("b.ckpt");
            ck.save(&p1).unwrap();
            let loaded = Checkpoint::load(&p1).unwrap();
            loaded.save(&p2).unwrap();
            assert_eq!(
                std::fs::read(&p1).unwrap(),
                std::fs::read(&p2).unwrap(),
                "{kind:?} roundtrip"
            );
            assert_eq!(loaded.model, ck.model);
            assert_eq!(loaded.step_count, 123);
        }
    }

    #[test]
    fn merged_checkpoints_roundtrip_and_stay_locked() {
        let ck = randomized_checkpoint(AdapterKind::MoSLora, 9);
        let alpha = PreferenceVector::new(vec![0.3, 0.7]).unwrap();
        let merged = ck.merge(&alpha).unwrap();
        assert_eq!(merged.model.adapter_state(), AdapterState::Merged);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        merged.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert!(loaded
            .locked_alpha
            .as_ref()
            .unwrap()
            .approx_eq(&alpha, 0.0));
        assert_eq!(loaded.model, merged.model);
        // Double merge is rejected.
        assert!(merged.merge(&alpha).is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let ck = randomized_checkpoint(AdapterKind::MoSLora, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        ck.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(CheckpointError::VersionMismatch { found: 99 })
        ));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        std::fs::write(&p, b"definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::BadMagic)));
    }
}
