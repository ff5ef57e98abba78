//! Cached forward pass.

use ndarray::{s, Array1, Array2};

use crate::adapter::{moslora_forward_seq, pblora_forward_seq, MoSLoraCache, PbLoraCache};

use super::{
    AdaptedLinear, Conditioning, LayerNormWeights, ModelError, ModelWeights, ProjectionAdapter,
    LN_EPS,
};

/// LayerNorm intermediates for one application.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    /// Normalized input before the affine map (T×D).
    pub xhat: Array2<f64>,
    /// Reciprocal standard deviation per position.
    pub rstd: Array1<f64>,
}

/// Cache of one adapted projection's forward.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // short-lived per-forward cache
pub(crate) enum ProjCache {
    Base,
    MoSLora(MoSLoraCache),
    PbLora(PbLoraCache),
    Merged,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    /// Input to the Q/K/V projections (T×D).
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub q_cache: ProjCache,
    pub k_cache: ProjCache,
    pub v_cache: ProjCache,
    /// Attention weights per head, each T×T row-stochastic and causal.
    pub probs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub attn: AttnCache,
    pub ln2: LnCache,
    /// Pre-activation of the MLP hidden layer (T×4D).
    pub up_pre: Array2<f64>,
}

/// Everything the backward pass needs, captured during forward.
///
/// Only activations that feed adapter gradients are kept; intermediates that
/// would only serve frozen base-weight gradients are dropped.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) ln_f: LnCache,
}

pub(crate) fn layer_norm(x: &Array2<f64>, w: &LayerNormWeights) -> (Array2<f64>, LnCache) {
    let t = x.nrows();
    let d = x.ncols();
    let mut xhat = Array2::<f64>::zeros((t, d));
    let mut rstd = Array1::<f64>::zeros(t);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[(i, j)] = (x[(i, j)] - mean) * r;
        }
    }
    let mut out = xhat.clone();
    out *= &w.gamma;
    out += &w.beta;
    (out, LnCache { xhat, rstd })
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn project(
    proj: &AdaptedLinear,
    h_in: &Array2<f64>,
    cond: &Conditioning,
    adapters_enabled: bool,
) -> Result<(Array2<f64>, ProjCache), ModelError> {
    if !adapters_enabled {
        return Ok((proj.base.forward_seq(h_in), ProjCache::Base));
    }
    match (&proj.adapter, cond) {
        (ProjectionAdapter::None, _) => Ok((proj.base.forward_seq(h_in), ProjCache::Base)),
        (ProjectionAdapter::Merged(layer), _) => Ok((layer.apply_seq(h_in), ProjCache::Merged)),
        (ProjectionAdapter::MoSLora(w), Conditioning::Mixed(o)) => {
            let (out, cache) =
                moslora_forward_seq(w, &proj.base.weight, &proj.base.bias, h_in, &o.vector)?;
            Ok((out, ProjCache::MoSLora(cache)))
        }
        (ProjectionAdapter::PbLora(w), Conditioning::Alpha(alpha)) => {
            let (out, cache) =
                pblora_forward_seq(w, &proj.base.weight, &proj.base.bias, h_in, alpha)?;
            Ok((out, ProjCache::PbLora(cache)))
        }
        // Wrong conditioning for the adapter kind; the caller-level check
        // reports the expected/got pair.
        (ProjectionAdapter::MoSLora(_), other) => Err(ModelError::ConditioningMismatch {
            expected: "mixed preference",
            got: other.name(),
        }),
        (ProjectionAdapter::PbLora(_), other) => Err(ModelError::ConditioningMismatch {
            expected: "preference vector",
            got: other.name(),
        }),
    }
}

/// Full forward pass returning logits and the activation cache.
pub fn forward_cached(
    weights: &ModelWeights,
    tokens: &[u32],
    cond: Conditioning,
    adapters_enabled: bool,
) -> Result<(Array2<f64>, ForwardCache), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    weights.validate_tokens(tokens)?;
    if adapters_enabled {
        weights.check_conditioning(&cond)?;
    }

    let t = tokens.len();
    let d = weights.config.d_model;
    let n_heads = weights.config.n_heads;
    let hd = weights.config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Array2::<f64>::zeros((t, d));
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &weights.tok_emb.row(tok as usize) + &weights.pos_emb.row(i);
        x.row_mut(i).assign(&row);
    }

    let mut layer_caches = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let (a, ln1) = layer_norm(&x, &layer.ln1);
        let (q, q_cache) = project(&layer.attn.q, &a, &cond, adapters_enabled)?;
        let (k, k_cache) = project(&layer.attn.k, &a, &cond, adapters_enabled)?;
        let (v, v_cache) = project(&layer.attn.v, &a, &cond, adapters_enabled)?;

        let mut ctx = Array2::<f64>::zeros((t, d));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // Softmax over the causal prefix of each row.
            let mut p = Array2::<f64>::zeros((t, t));
            for i in 0..t {
                let row = scores.slice(s![i, ..=i]);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..=i {
                    let e = (scores[(i, j)] - max).exp();
                    p[(i, j)] = e;
                    denom += e;
                }
                for j in 0..=i {
                    p[(i, j)] /= denom;
                }
            }
            let ctx_h = p.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            probs.push(p);
        }

        let attn_out = layer.attn.out.forward_seq(&ctx);
        x += &attn_out;

        let (m, ln2) = layer_norm(&x, &layer.ln2);
        let up_pre = layer.mlp.up.forward_seq(&m);
        let act = up_pre.mapv(gelu);
        let down = layer.mlp.down.forward_seq(&act);
        x += &down;

        layer_caches.push(LayerCache {
            ln1,
            attn: AttnCache {
                a,
                q,
                k,
                v,
                q_cache,
                k_cache,
                v_cache,
                probs,
            },
            ln2,
            up_pre,
        });
    }

    let (a_f, ln_f) = layer_norm(&x, &weights.ln_f);
    let logits = a_f.dot(&weights.unembed);
    debug_assert_eq!(logits.dim(), (t, weights.config.vocab_size));
    Ok((
        logits,
        ForwardCache {
            layers: layer_caches,
            ln_f,
        },
    ))
}
