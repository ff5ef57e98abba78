use super::*;
use crate::preference::{embed_objective, mix};
use ndarray::Array2;
use rand::Rng;

fn tiny_config(adapter: Option<AdapterSpec>) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 24,
        adapter,
    }
}

fn moslora_spec(d: usize) -> AdapterSpec {
    AdapterSpec {
        kind: AdapterKind::MoSLora,
        config: AdapterConfig {
            m: d,
            n: d,
            r1: 2,
            r2: 2,
        },
        cores: 0,
    }
}

fn mixed_for(weights: &ModelWeights) -> MixedPreference {
    let e1 = embed_objective("first", &weights.tok_emb).unwrap();
    let e2 = embed_objective("second", &weights.tok_emb).unwrap();
    let alpha = PreferenceVector::new(vec![0.4, 0.6]).unwrap();
    mix(&alpha, &[e1, e2]).unwrap()
}

/// Gives every adapter tensor nonzero entries so modulation actually acts.
fn randomize_adapters(weights: &mut ModelWeights, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    weights.visit_adapter_tensors_mut(&mut |t| {
        for v in t.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    });
}

#[test]
fn fresh_adapter_matches_base_logits() {
    let plain = ModelWeights::init(&tiny_config(None), 7).unwrap();
    let adapted = ModelWeights::init(&tiny_config(Some(moslora_spec(16))), 7).unwrap();
    let tokens = [1u32, 5, 9, 3];
    let o = mixed_for(&adapted);
    let base = forward_logits(&plain, &tokens, Conditioning::None).unwrap();
    let with_adapter = forward_logits(&adapted, &tokens, Conditioning::Mixed(&o)).unwrap();
    assert_eq!(base, with_adapter);
    // And the base view of the adapted model is the plain model.
    let base_view = forward_logits_base(&adapted, &tokens).unwrap();
    assert_eq!(base, base_view);
}

#[test]
fn logits_are_causal() {
    let weights = ModelWeights::init(&tiny_config(None), 3).unwrap();
    let tokens = [2u32, 7, 1, 4, 11, 6];
    let logits = forward_logits(&weights, &tokens, Conditioning::None).unwrap();
    let mut permuted = tokens;
    permuted.swap(4, 5);
    permuted[4] = 13;
    let logits_p = forward_logits(&weights, &permuted, Conditioning::None).unwrap();
    for t in 0..4 {
        for v in 0..16 {
            assert_eq!(logits[(t, v)], logits_p[(t, v)], "row {t} changed");
        }
    }
    assert!((0..16).any(|v| logits[(4, v)] != logits_p[(4, v)]));
}

#[test]
fn rows_normalize_to_one() {
    let weights = ModelWeights::init(&tiny_config(None), 5).unwrap();
    let tokens = [0u32, 3, 15, 8];
    let logits = forward_logits(&weights, &tokens, Conditioning::None).unwrap();
    for row in logits.rows() {
        let ls = log_softmax_row(row.as_slice().unwrap());
        let total: f64 = ls.iter().map(|&x| x.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-9, "sum {total}");
    }
}

#[test]
fn empty_response_scores_zero() {
    let weights = ModelWeights::init(&tiny_config(None), 1).unwrap();
    let prompt = TokenSequence::prompt(vec![1, 2, 3]);
    let response = TokenSequence::response(vec![]);
    let lp = sequence_log_prob(&weights, &prompt, &response, Conditioning::None).unwrap();
    assert_eq!(lp, 0.0);
}

#[test]
fn single_token_response_matches_logits_row() {
    let weights = ModelWeights::init(&tiny_config(None), 1).unwrap();
    let prompt = TokenSequence::prompt(vec![1, 2, 3]);
    let response = TokenSequence::response(vec![9]);
    let lp = sequence_log_prob(&weights, &prompt, &response, Conditioning::None).unwrap();
    let logits = forward_logits(&weights, &[1, 2, 3, 9], Conditioning::None).unwrap();
    let ls = log_softmax_row(logits.row(2).as_slice().unwrap());
    assert!((lp - ls[9]).abs() < 1e-12);
}

/// Chain-rule oracle: walk the response computing full probability
/// distributions in probability space and multiply step probabilities.
#[test]
fn sequence_log_prob_matches_chain_rule_enumeration() {
    let weights = ModelWeights::init(&tiny_config(None), 21).unwrap();
    let prompt = TokenSequence::prompt(vec![4, 1]);
    let response = TokenSequence::response(vec![7, 2, 2, 14, 5]);
    let lp = sequence_log_prob(&weights, &prompt, &response, Conditioning::None).unwrap();

    let mut product = 1.0f64;
    let mut context = prompt.tokens.clone();
    for &tok in &response.tokens {
        let logits = forward_logits(&weights, &context, Conditioning::None).unwrap();
        let last = logits.row(context.len() - 1);
        let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights_exp: Vec<f64> = last.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = weights_exp.iter().sum();
        product *= weights_exp[tok as usize] / z;
        context.push(tok);
    }
    assert!((lp - product.ln()).abs() < 1e-9, "{lp} vs {}", product.ln());
}

#[test]
fn reward_is_invariant_under_merge() {
    let mut weights = ModelWeights::init(&tiny_config(Some(moslora_spec(16))), 11).unwrap();
    randomize_adapters(&mut weights, 99);
    let o = mixed_for(&weights);
    let merged = weights.merge_adapters(&o).unwrap();
    let prompt = TokenSequence::prompt(vec![3, 8, 2]);
    let response = TokenSequence::response(vec![1, 12, 6, 6]);
    let adapted = sequence_log_prob(&weights, &prompt, &response, Conditioning::Mixed(&o)).unwrap();
    let collapsed = sequence_log_prob(&merged, &prompt, &response, Conditioning::None).unwrap();
    assert!(
        (adapted - collapsed).abs() <= 1e-6,
        "{adapted} vs {collapsed}"
    );
}

#[test]
fn conditioning_must_match_adapter_kind() {
    let weights = ModelWeights::init(&tiny_config(Some(moslora_spec(16))), 2).unwrap();
    let err = forward_logits(&weights, &[1, 2], Conditioning::None).unwrap_err();
    assert!(matches!(err, ModelError::ConditioningMismatch { .. }));

    let alpha = PreferenceVector::new(vec![0.5, 0.5]).unwrap();
    let err = forward_logits(&weights, &[1, 2], Conditioning::Alpha(&alpha)).unwrap_err();
    assert!(matches!(err, ModelError::ConditioningMismatch { .. }));

    let plain = ModelWeights::init(&tiny_config(None), 2).unwrap();
    let o = mixed_for(&plain);
    let err = forward_logits(&plain, &[1, 2], Conditioning::Mixed(&o)).unwrap_err();
    assert!(matches!(err, ModelError::ConditioningMismatch { .. }));
}

#[test]
fn length_and_token_range_are_enforced() {
    let weights = ModelWeights::init(&tiny_config(None), 2).unwrap();
    let long: Vec<u32> = vec![1; 25];
    assert!(matches!(
        forward_logits(&weights, &long, Conditioning::None),
        Err(ModelError::SequenceTooLong { .. })
    ));
    assert!(matches!(
        forward_logits(&weights, &[1, 99], Conditioning::None),
        Err(ModelError::TokenOutOfRange { .. })
    ));
    let prompt = TokenSequence::prompt(vec![1; 20]);
    let response = TokenSequence::response(vec![1; 10]);
    assert!(matches!(
        sequence_log_prob(&weights, &prompt, &response, Conditioning::None),
        Err(ModelError::SequenceTooLong { .. })
    ));
}

#[test]
fn base_checksum_ignores_adapter_mutations() {
    let mut weights = ModelWeights::init(&tiny_config(Some(moslora_spec(16))), 4).unwrap();
    let before = weights.base_checksum();
    randomize_adapters(&mut weights, 5);
    assert_eq!(before, weights.base_checksum());
    // Touching a base tensor does change it.
    weights.tok_emb[(0, 0)] += 1.0;
    assert_ne!(before, weights.base_checksum());
}

/// Full-model gradient check: a random linear probe of the logits,
/// differentiated with respect to every adapter tensor.
#[test]
#[allow(clippy::needless_range_loop)] // index selects the perturbed tensor
fn model_backward_matches_finite_differences() {
    let config = ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        adapter: Some(AdapterSpec {
            kind: AdapterKind::MoSLora,
            config: AdapterConfig {
                m: 8,
                n: 8,
                r1: 1,
                r2: 1,
            },
            cores: 0,
        }),
    };
    let mut weights = ModelWeights::init(&config, 6).unwrap();
    randomize_adapters(&mut weights, 66);
    let o = mixed_for(&weights);
    let tokens = [1u32, 4, 2, 7];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probe = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));

    let loss = |w: &ModelWeights| -> f64 {
        let logits = forward_logits(w, &tokens, Conditioning::Mixed(&o)).unwrap();
        (&logits * &probe).sum()
    };

    let (_, cache) = forward_cached(&weights, &tokens, Conditioning::Mixed(&o), true).unwrap();
    let mut grads = ModelGrads::zeros_like(&weights);
    backward(&weights, &cache, &probe, &mut grads);

    let mut analytic: Vec<Array2<f64>> = Vec::new();
    grads.visit_tensors(&mut |g| analytic.push(g.clone()));

    let step = 1e-5;
    let mut checked = 0;
    for ti in 0..analytic.len() {
        let dim = analytic[ti].raw_dim();
        for i in 0..dim[0] {
            for j in 0..dim[1] {
                let mut plus = weights.clone();
                let mut idx = 0;
                plus.visit_adapter_tensors_mut(&mut |t| {
                    if idx == ti {
                        t[(i, j)] += step;
                    }
                    idx += 1;
                });
                let mut minus = weights.clone();
                idx = 0;
                minus.visit_adapter_tensors_mut(&mut |t| {
                    if idx == ti {
                        t[(i, j)] -= step;
                    }
                    idx += 1;
                });
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let exact = analytic[ti][(i, j)];
                let denom = exact.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    ((numeric - exact).abs() / denom) < 1e-3,
                    "tensor {ti} [{i},{j}]: analytic {exact}, fd {numeric}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 50, "expected to check many entries, got {checked}");
}
