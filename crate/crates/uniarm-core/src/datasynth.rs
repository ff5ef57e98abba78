//! Synthetic multi-objective preference data.
//!
//! Objectives are disjoint token classes; the oracle score of a response for
//! objective i is the fraction of its tokens that fall in class i. Response
//! pairs are drawn with conflicting class biases so that no response can win
//! every objective at once, which gives the trade-off front its shape.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TokenSequence, EOS_TOKEN};
use crate::preference::PreferenceVector;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("token classes {a} and {b} overlap (token {token})")]
    ClassOverlap { a: usize, b: usize, token: u32 },
    #[error("vocabulary of size {vocab} cannot hold the requested disjoint classes")]
    VocabularyTooSmall { vocab: usize },
    #[error("gave up generating non-tied pairs after {attempts} attempts")]
    GenerationStalled { attempts: usize },
    #[error("record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Configuration of the synthetic preference task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    /// Number of objectives.
    pub k: usize,
    /// Disjoint token subsets, one per objective. Token 0 is reserved for
    /// end-of-sequence and may not appear in any class.
    pub token_classes: Vec<Vec<u32>>,
    pub prompt_len: usize,
    pub response_len: usize,
    pub dataset_size: usize,
}

impl SynthTaskConfig {
    /// `k` equal-sized contiguous classes starting at token 1.
    pub fn contiguous_classes(k: usize, class_size: usize, prompt_len: usize,
        response_len: usize, dataset_size: usize) -> Self {
        let token_classes = (0..k)
            .map(|i| {
                let start = 1 + (i * class_size) as u32;
                (start..start + class_size as u32).collect()
            })
            .collect();
        Self {
            k,
            token_classes,
            prompt_len,
            response_len,
            dataset_size,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), DataError> {
        if self.k < 2 {
            return Err(DataError::InvalidConfig(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.token_classes.len() != self.k {
            return Err(DataError::InvalidConfig(format!(
                "expected {} token classes, got {}",
                self.k,
                self.token_classes.len()
            )));
        }
        if self.prompt_len == 0 || self.response_len == 0 || self.dataset_size == 0 {
            return Err(DataError::InvalidConfig(
                "prompt_len, response_len, and dataset_size must be positive".into(),
            ));
        }
        let mut seen: Vec<Option<usize>> = vec![None; vocab_size];
        for (ci, class) in self.token_classes.iter().enumerate() {
            if class.is_empty() {
                return Err(DataError::InvalidConfig(format!("class {ci} is empty")));
            }
            for &tok in class {
                if tok == EOS_TOKEN {
                    return Err(DataError::InvalidConfig(format!(
                        "class {ci} contains the reserved end token {EOS_TOKEN}"
                    )));
                }
                if tok as usize >= vocab_size {
                    return Err(DataError::VocabularyTooSmall { vocab: vocab_size });
                }
                if let Some(prev) = seen[tok as usize] {
                    return Err(DataError::ClassOverlap {
                        a: prev,
                        b: ci,
                        token: tok,
                    });
                }
                seen[tok as usize] = Some(ci);
            }
        }
        Ok(())
    }
}

/// One training example: a prompt, two candidate responses, their oracle
/// scores for every objective, and the per-objective preference labels.
///
/// `labels[i]` is 0 when the first response wins objective i and 1 when the
/// second does; tied comparisons are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePairRecord {
    pub prompt: TokenSequence,
    pub y1: TokenSequence,
    pub y2: TokenSequence,
    pub scores1: Vec<f64>,
    pub scores2: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Outcome of comparing two oracle scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    /// First response preferred (stored as 0).
    First,
    /// Second response preferred (stored as 1).
    Second,
    /// Indifferent; the caller drops the record.
    Tie,
}

impl PairLabel {
    pub fn as_bit(self) -> Option<u8> {
        match self {
            PairLabel::First => Some(0),
            PairLabel::Second => Some(1),
            PairLabel::Tie => None,
        }
    }
}

/// Fraction of response tokens that belong to the objective's token class.
/// Empty responses score 0 by definition.
pub fn oracle_score(y: &TokenSequence, objective_index: usize, task: &SynthTaskConfig) -> f64 {
    let class = &task.token_classes[objective_index];
    if y.tokens.is_empty() {
        return 0.0;
    }
    let hits = y.tokens.iter().filter(|t| class.contains(t)).count();
    hits as f64 / y.tokens.len() as f64
}

pub fn label_pair(s1: f64, s2: f64) -> PairLabel {
    if s1 > s2 {
        PairLabel::First
    } else if s1 < s2 {
        PairLabel::Second
    } else {
        PairLabel::Tie
    }
}

/// Overall label under a preference vector: compares the α-weighted scores.
pub fn aggregate_label(record: &PreferencePairRecord, alpha: &PreferenceVector) -> PairLabel {
    let s1: f64 = alpha
        .components()
        .iter()
        .zip(&record.scores1)
        .map(|(a, s)| a * s)
        .sum();
    let s2: f64 = alpha
        .components()
        .iter()
        .zip(&record.scores2)
        .map(|(a, s)| a * s)
        .sum();
    label_pair(s1, s2)
}

fn biased_response(
    rng: &mut ChaCha8Rng,
    task: &SynthTaskConfig,
    vocab_size: usize,
    target_class: usize,
) -> TokenSequence {
    // Most tokens come from the target class; the rest are uniform over the
    // non-reserved vocabulary, which keeps scores off the {0, 1} extremes.
    const BIAS: f64 = 0.75;
    let class = &task.token_classes[target_class];
    let tokens = (0..task.response_len)
        .map(|_| {
            if rng.gen_bool(BIAS) {
                class[rng.gen_range(0..class.len())]
            } else {
                rng.gen_range(1..vocab_size as u32)
            }
        })
        .collect();
    TokenSequence::response(tokens)
}

/// Generates `dataset_size` records with conflicting objectives.
///
/// Records where the two responses tie on any per-objective score are
/// regenerated, so every stored comparison is strict. Deterministic per seed.
pub fn generate_dataset(
    task: &SynthTaskConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<PreferencePairRecord>, DataError> {
    task.validate(vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(task.dataset_size);
    let max_attempts = task.dataset_size.saturating_mul(200).max(10_000);
    let mut attempts = 0;
    while records.len() < task.dataset_size {
        attempts += 1;
        if attempts > max_attempts {
            return Err(DataError::GenerationStalled { attempts });
        }
        let prompt = TokenSequence::prompt(
            (0..task.prompt_len)
                .map(|_| rng.gen_range(1..vocab_size as u32))
                .collect(),
        );
        // Two different target classes force a trade-off.
        let t1 = rng.gen_range(0..task.k);
        let mut t2 = rng.gen_range(0..task.k - 1);
        if t2 >= t1 {
            t2 += 1;
        }
        let y1 = biased_response(&mut rng, task, vocab_size, t1);
        let y2 = biased_response(&mut rng, task, vocab_size, t2);
        let scores1: Vec<f64> = (0..task.k).map(|i| oracle_score(&y1, i, task)).collect();
        let scores2: Vec<f64> = (0..task.k).map(|i| oracle_score(&y2, i, task)).collect();
        let labels: Option<Vec<u8>> = scores1
            .iter()
            .zip(&scores2)
            .map(|(&a, &b)| label_pair(a, b).as_bit())
            .collect();
        let Some(labels) = labels else {
            continue; // At least one objective tied; drop the pair.
        };
        records.push(PreferencePairRecord {
            prompt,
            y1,
            y2,
            scores1,
            scores2,
            labels,
        });
    }
    Ok(records)
}

/// Contiguous train/validation/test partition by the given fractions.
pub fn split_dataset(
    records: &[PreferencePairRecord],
    fractions: (f64, f64, f64),
) -> (
    Vec<PreferencePairRecord>,
    Vec<PreferencePairRecord>,
    Vec<PreferencePairRecord>,
) {
    let n = records.len();
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_val = (n as f64 * fractions.1).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let train = records[..n_train].to_vec();
    let val = records[n_train..n_train + n_val].to_vec();
    let test = records[n_train + n_val..].to_vec();
    (train, val, test)
}

/// On-disk form of one record: one JSON object per line.
#[derive(Serialize, Deserialize)]
struct RecordWire {
    prompt: Vec<u32>,
    y1: Vec<u32>,
    y2: Vec<u32>,
    scores1: Vec<f64>,
    scores2: Vec<f64>,
    labels: Vec<u8>,
}

/// Writes records as newline-delimited JSON (UTF-8, LF).
pub fn write_records(path: &Path, records: &[PreferencePairRecord]) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        let wire = RecordWire {
            prompt: r.prompt.tokens.clone(),
            y1: r.y1.tokens.clone(),
            y2: r.y2.tokens.clone(),
            scores1: r.scores1.clone(),
            scores2: r.scores2.clone(),
            labels: r.labels.clone(),
        };
        serde_json::to_writer(&mut out, &wire)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PreferencePairRecord>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordWire =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedRecord {
                index,
                reason: e.to_string(),
            })?;
        let k = wire.scores1.len();
        if wire.scores2.len() != k || wire.labels.len() != k {
            return Err(DataError::MalformedRecord {
                index,
                reason: "scores1, scores2, and labels must share a length".into(),
            });
        }
        records.push(PreferencePairRecord {
            prompt: TokenSequence::prompt(wire.prompt),
            y1: TokenSequence::response(wire.y1),
            y2: TokenSequence::response(wire.y2),
            scores1: wire.scores1,
            scores2: wire.scores2,
            labels: wire.labels,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SynthTaskConfig {
        SynthTaskConfig::contiguous_classes(2, 16, 8, 16, 50)
    }

    #[test]
    fn oracle_score_is_the_class_fraction() {
        let t = task();
        // Class 0 is tokens 1..=16, class 1 is 17..=32.
        let all_in = TokenSequence::response(vec![1, 2, 3, 4]);
        assert_eq!(oracle_score(&all_in, 0, &t), 1.0);
        assert_eq!(oracle_score(&all_in, 1, &t), 0.0);
        let mixed = TokenSequence::response(vec![1, 2, 3, 40, 40, 40, 40, 40]);
        assert_eq!(oracle_score(&mixed, 0, &t), 0.375);
        let empty = TokenSequence::response(vec![]);
        assert_eq!(oracle_score(&empty, 0, &t), 0.0);
    }

    #[test]
    fn label_pair_covers_all_orderings() {
        assert_eq!(label_pair(0.8, 0.2), PairLabel::First);
        assert_eq!(label_pair(0.2, 0.8), PairLabel::Second);
        assert_eq!(label_pair(0.5, 0.5), PairLabel::Tie);
    }

    #[test]
    fn aggregate_label_weights_scores() {
        let record = PreferencePairRecord {
            prompt: TokenSequence::prompt(vec![1]),
            y1: TokenSequence::response(vec![1]),
            y2: TokenSequence::response(vec![17]),
            scores1: vec![1.0, 0.0],
            scores2: vec![0.0, 1.0],
            labels: vec![0, 1],
        };
        let lean_first = PreferenceVector::new(vec![0.6, 0.4]).unwrap();
        assert_eq!(aggregate_label(&record, &lean_first), PairLabel::First);
        let balanced = PreferenceVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(aggregate_label(&record, &balanced), PairLabel::Tie);
        // Vertices reduce to the stored per-objective labels.
        assert_eq!(
            aggregate_label(&record, &PreferenceVector::vertex(2, 0)),
            PairLabel::First
        );
        assert_eq!(
            aggregate_label(&record, &PreferenceVector::vertex(2, 1)),
            PairLabel::Second
        );
    }

    #[test]
    fn generated_records_satisfy_invariants() {
        let t = task();
        let records = generate_dataset(&t, 64, 3).unwrap();
        assert_eq!(records.len(), t.dataset_size);
        for r in &records {
            assert_eq!(r.prompt.len(), t.prompt_len);
            assert_eq!(r.y1.len(), t.response_len);
            assert_eq!(r.scores1.len(), t.k);
            for i in 0..t.k {
                assert!((0.0..=1.0).contains(&r.scores1[i]));
                assert!((0.0..=1.0).contains(&r.scores2[i]));
                assert_ne!(r.scores1[i], r.scores2[i], "ties must be dropped");
                let expect = label_pair(r.scores1[i], r.scores2[i]).as_bit().unwrap();
                assert_eq!(r.labels[i], expect);
            }
            assert!(r.prompt.tokens.iter().all(|&t| t != EOS_TOKEN));
            assert!(r.y1.tokens.iter().all(|&t| t != EOS_TOKEN));
        }
    }

    #[test]
    fn score_gaps_are_negatively_correlated() {
        let t = SynthTaskConfig::contiguous_classes(2, 16, 8, 16, 1000);
        let records = generate_dataset(&t, 64, 11).unwrap();
        let gaps: Vec<(f64, f64)> = records
            .iter()
            .map(|r| (r.scores1[0] - r.scores2[0], r.scores1[1] - r.scores2[1]))
            .collect();
        let n = gaps.len() as f64;
        let mean0 = gaps.iter().map(|g| g.0).sum::<f64>() / n;
        let mean1 = gaps.iter().map(|g| g.1).sum::<f64>() / n;
        let cov = gaps
            .iter()
            .map(|g| (g.0 - mean0) * (g.1 - mean1))
            .sum::<f64>()
            / n;
        let var0 = gaps.iter().map(|g| (g.0 - mean0).powi(2)).sum::<f64>() / n;
        let var1 = gaps.iter().map(|g| (g.1 - mean1).powi(2)).sum::<f64>() / n;
        let pearson = cov / (var0 * var1).sqrt();
        assert!(pearson < 0.0, "expected conflict, got correlation {pearson}");
    }

    #[test]
    fn generation_is_deterministic() {
        let t = task();
        let a = generate_dataset(&t, 64, 5).unwrap();
        let b = generate_dataset(&t, 64, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_classes_are_rejected() {
        let mut t = task();
        t.token_classes[1][0] = t.token_classes[0][3];
        let err = generate_dataset(&t, 64, 0).unwrap_err();
        assert!(matches!(err, DataError::ClassOverlap { .. }), "{err}");
    }

    #[test]
    fn small_vocabulary_is_rejected() {
        let t = SynthTaskConfig::contiguous_classes(2, 16, 4, 8, 10);
        let err = generate_dataset(&t, 20, 0).unwrap_err();
        assert!(matches!(err, DataError::VocabularyTooSmall { .. }));
    }

    #[test]
    fn split_partitions_the_records() {
        let t = SynthTaskConfig::contiguous_classes(2, 16, 4, 8, 100);
        let records = generate_dataset(&t, 64, 1).unwrap();
        let (train, val, test) = split_dataset(&records, (0.8, 0.1, 0.1));
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 10);
        assert_eq!(test.len(), 10);
        let mut rebuilt = train.clone();
        rebuilt.extend(val.clone());
        rebuilt.extend(test.clone());
        assert_eq!(rebuilt, records);
    }

    #[test]
    fn records_roundtrip_through_ndjson() {
        let t = task();
        let records = generate_dataset(&t, 64, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.ndjson");
        write_records(&path, &records).unwrap();
        let loaded = read_records(&path).unwrap();
        assert_eq!(records, loaded);
        // Writing again produces identical bytes.
        let path2 = dir.path().join("records2.ndjson");
        write_records(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
