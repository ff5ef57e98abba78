//! Preference vectors on the simplex, objective embeddings, and sweep grids.
//!
//! A preference vector weights the objectives; its embedding-space mixture
//! `o' = Σ α_i o_i` is the conditioning input consumed by the modulated
//! adapter branch.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of `Σ α_i` from 1.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("preference vector must have at least one component")]
    Empty,
    #[error("component {index} is negative ({value})")]
    NegativeComponent { index: usize, value: f64 },
    #[error("components sum to {sum}, expected 1 within {SIMPLEX_TOL}")]
    NotNormalized { sum: f64 },
    #[error("expected {expected} components, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("objective description must be nonempty")]
    EmptyDescription,
    #[error("need at least 2 objectives, got {0}")]
    TooFewObjectives(usize),
    #[error("no sweep grid defined for k = {0}")]
    UnsupportedSweep(usize),
    #[error("objective embeddings have inconsistent lengths")]
    InconsistentEmbeddings,
}

/// A point on the simplex: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PreferenceVector {
    alpha: Vec<f64>,
}

impl PreferenceVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self, PreferenceError> {
        if alpha.is_empty() {
            return Err(PreferenceError::Empty);
        }
        for (index, &value) in alpha.iter().enumerate() {
            if !(value >= 0.0) {
                return Err(PreferenceError::NegativeComponent { index, value });
            }
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(PreferenceError::NotNormalized { sum });
        }
        Ok(Self { alpha })
    }

    /// The vertex e_i of the simplex.
    pub fn vertex(k: usize, i: usize) -> Self {
        assert!(i < k, "vertex index {i} out of range for k = {k}");
        let mut alpha = vec![0.0; k];
        alpha[i] = 1.0;
        Self { alpha }
    }

    pub fn components(&self) -> &[f64] {
        &self.alpha
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    /// Componentwise equality within `tol`; false on length mismatch.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.alpha.len() == other.alpha.len()
            && self
                .alpha
                .iter()
                .zip(&other.alpha)
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

impl TryFrom<Vec<f64>> for PreferenceVector {
    type Error = PreferenceError;
    fn try_from(alpha: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(alpha)
    }
}

impl From<PreferenceVector> for Vec<f64> {
    fn from(v: PreferenceVector) -> Vec<f64> {
        v.alpha
    }
}

/// Semantic embedding of one objective, derived from the frozen embedding
/// table of the model.
#[derive(Debug, Clone)]
pub struct ObjectiveEmbedding {
    pub vector: Array1<f64>,
    pub description: String,
}

/// The α-weighted combination of objective embeddings.
#[derive(Debug, Clone)]
pub struct MixedPreference {
    pub vector: Array1<f64>,
}

/// Maps an objective description to token ids: each UTF-8 byte becomes one
/// token, folded into the vocabulary.
pub fn description_tokens(description: &str, vocab_size: usize) -> Vec<u32> {
    description
        .bytes()
        .map(|b| u32::from(b) % vocab_size as u32)
        .collect()
}

/// Encodes a description through the embedding table: mean of the token
/// embedding rows.
pub fn embed_objective(
    description: &str,
    embedding_table: &Array2<f64>,
) -> Result<ObjectiveEmbedding, PreferenceError> {
    if description.is_empty() {
        return Err(PreferenceError::EmptyDescription);
    }
    let vocab_size = embedding_table.nrows();
    let tokens = description_tokens(description, vocab_size);
    let d = embedding_table.ncols();
    let mut vector = Array1::<f64>::zeros(d);
    for &t in &tokens {
        vector += &embedding_table.row(t as usize);
    }
    vector /= tokens.len() as f64;
    Ok(ObjectiveEmbedding {
        vector,
        description: description.to_string(),
    })
}

/// Weighted sum `o' = Σ α_i o_i`.
pub fn mix(
    alpha: &PreferenceVector,
    embeddings: &[ObjectiveEmbedding],
) -> Result<MixedPreference, PreferenceError> {
    if alpha.k() != embeddings.len() {
        return Err(PreferenceError::LengthMismatch {
            expected: embeddings.len(),
            got: alpha.k(),
        });
    }
    let d = embeddings[0].vector.len();
    if embeddings.iter().any(|e| e.vector.len() != d) {
        return Err(PreferenceError::InconsistentEmbeddings);
    }
    let mut vector = Array1::<f64>::zeros(d);
    for (w, e) in alpha.components().iter().zip(embeddings) {
        vector.scaled_add(*w, &e.vector);
    }
    Ok(MixedPreference { vector })
}

/// Draws one preference vector uniformly from the simplex.
pub fn sample_simplex(k: usize, seed: u64) -> Result<PreferenceVector, PreferenceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_simplex_with(k, &mut rng)
}

/// Stream variant of [`sample_simplex`] for callers that own an RNG.
///
/// Uniformity comes from the symmetric unit-concentration Dirichlet: k
/// standard exponentials, normalized.
pub fn sample_simplex_with<R: Rng>(
    k: usize,
    rng: &mut R,
) -> Result<PreferenceVector, PreferenceError> {
    if k < 2 {
        return Err(PreferenceError::TooFewObjectives(k));
    }
    let mut draws: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -u.ln()
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    // Normalization can leave the sum one ulp off; pin the last coordinate.
    let head: f64 = draws[..k - 1].iter().sum();
    draws[k - 1] = (1.0 - head).max(0.0);
    PreferenceVector::new(draws)
}

/// Sweep protocol selector. Only the published grid is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepScheme {
    Standard,
}

/// The evaluation sweep over the simplex.
///
/// k = 2: the 11 vectors (0.0, 1.0) … (1.0, 0.0) in steps of 0.1.
/// k = 3: 30 edge points (one coordinate zero, step 0.1, shared vertices
/// deduplicated) plus the 6 interior points with all coordinates positive on
/// the 0.2 grid — 36 vectors total.
pub fn sweep_grid(k: usize, scheme: SweepScheme) -> Result<Vec<PreferenceVector>, PreferenceError> {
    let SweepScheme::Standard = scheme;
    match k {
        2 => Ok((0..=10)
            .map(|i| {
                PreferenceVector::new(vec![i as f64 / 10.0, (10 - i) as f64 / 10.0])
                    .expect("grid point is on the simplex")
            })
            .collect()),
        3 => {
            let mut out = Vec::with_capacity(36);
            let mut seen: Vec<[u8; 3]> = Vec::new();
            // Edges: coordinate `zero` fixed at 0, the other two sweep in 0.1 steps.
            for zero in 0..3 {
                let (lo, hi) = match zero {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                for i in 0..=10u8 {
                    let mut tenths = [0u8; 3];
                    tenths[lo] = i;
                    tenths[hi] = 10 - i;
                    if seen.contains(&tenths) {
                        continue;
                    }
                    seen.push(tenths);
                    out.push(
                        PreferenceVector::new(tenths.map(|t| t as f64 / 10.0).to_vec())
                            .expect("grid point is on the simplex"),
                    );
                }
            }
            // Interior: all coordinates positive, step 0.2.
            for a in [2u8, 4, 6, 8] {
                for b in [2u8, 4, 6, 8] {
                    if a + b >= 10 {
                        continue;
                    }
                    let c = 10 - a - b;
                    if c % 2 != 0 || c == 0 {
                        continue;
                    }
                    out.push(
                        PreferenceVector::new(vec![
                            a as f64 / 10.0,
                            b as f64 / 10.0,
                            c as f64 / 10.0,
                        ])
                        .expect("grid point is on the simplex"),
                    );
                }
            }
            Ok(out)
        }
        other => Err(PreferenceError::UnsupportedSweep(other)),
    }
}
