//! Backpropagation from the logits down to the adapter tensors.
//!
//! Only adapter parameters are trainable; base tensors receive no gradients,
//! but activation gradients flow through every operation on the way down.

use ndarray::{s, Array2, Axis};

use crate::adapter::{
    moslora_backward_seq, pblora_backward_seq, MoSLoraGrads, PbLoraGrads,
};

use super::forward::{gelu_prime, ForwardCache, LnCache, ProjCache};
use super::{AdaptedLinear, LayerNormWeights, ModelWeights, ProjectionAdapter};

/// Gradients for one adapted projection.
#[derive(Debug, Clone)]
pub enum ProjGrads {
    None,
    MoSLora(MoSLoraGrads),
    PbLora(PbLoraGrads),
}

impl ProjGrads {
    fn zeros_like(proj: &AdaptedLinear) -> Self {
        match &proj.adapter {
            ProjectionAdapter::None | ProjectionAdapter::Merged(_) => ProjGrads::None,
            ProjectionAdapter::MoSLora(w) => ProjGrads::MoSLora(MoSLoraGrads::zeros_like(w)),
            ProjectionAdapter::PbLora(w) => ProjGrads::PbLora(PbLoraGrads::zeros_like(w)),
        }
    }

    fn visit_tensors<'a>(&'a self, f: &mut impl FnMut(&'a Array2<f64>)) {
        match self {
            ProjGrads::None => {}
            ProjGrads::MoSLora(g) => g.visit_tensors(f),
            ProjGrads::PbLora(g) => g.visit_tensors(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerAdapterGrads {
    pub q: ProjGrads,
    pub k: ProjGrads,
    pub v: ProjGrads,
}

/// Gradients of a scalar loss with respect to every trainable tensor,
/// ordered exactly like [`ModelWeights::visit_adapter_tensors_mut`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layers: Vec<LayerAdapterGrads>,
}

impl ModelGrads {
    pub fn zeros_like(weights: &ModelWeights) -> Self {
        Self {
            layers: weights
                .layers
                .iter()
                .map(|l| LayerAdapterGrads {
                    q: ProjGrads::zeros_like(&l.attn.q),
                    k: ProjGrads::zeros_like(&l.attn.k),
                    v: ProjGrads::zeros_like(&l.attn.v),
                })
                .collect(),
        }
    }

    pub fn visit_tensors<'a>(&'a self, f: &mut impl FnMut(&'a Array2<f64>)) {
        for layer in &self.layers {
            layer.q.visit_tensors(f);
            layer.k.visit_tensors(f);
            layer.v.visit_tensors(f);
        }
    }

    /// Largest absolute entry; useful as a divergence probe.
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit_tensors(&mut |t| {
            for &v in t.iter() {
                m = m.max(v.abs());
            }
        });
        m
    }
}

fn ln_backward(dy: &Array2<f64>, cache: &LnCache, w: &LayerNormWeights) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dxhat = dy.clone();
    dxhat *= &w.gamma;
    let mut dx = Array2::<f64>::zeros((t, d));
    for i in 0..t {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            m1 += dxhat[(i, j)];
            m2 += dxhat[(i, j)] * cache.xhat[(i, j)];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[(i, j)] = r * (dxhat[(i, j)] - m1 - cache.xhat[(i, j)] * m2);
        }
    }
    dx
}

fn proj_backward(
    proj: &AdaptedLinear,
    h_in: &Array2<f64>,
    cache: &ProjCache,
    grad_out: &Array2<f64>,
    grads: &mut ProjGrads,
) -> Array2<f64> {
    match (cache, grads) {
        (ProjCache::Base, _) => grad_out.dot(&proj.base.weight),
        (ProjCache::Merged, _) => match &proj.adapter {
            ProjectionAdapter::Merged(m) => grad_out.dot(&m.w_tilde),
            _ => unreachable!("merged cache without merged adapter"),
        },
        (ProjCache::MoSLora(c), ProjGrads::MoSLora(g)) => match &proj.adapter {
            ProjectionAdapter::MoSLora(w) => moslora_backward_seq(w, h_in, c, grad_out, g),
            _ => unreachable!("cache/adapter kind mismatch"),
        },
        (ProjCache::PbLora(c), ProjGrads::PbLora(g)) => match &proj.adapter {
            ProjectionAdapter::PbLora(w) => pblora_backward_seq(w, h_in, c, grad_out, g),
            _ => unreachable!("cache/adapter kind mismatch"),
        },
        _ => unreachable!("cache/grads kind mismatch"),
    }
}

/// Accumulates `d loss / d adapter-tensor` into `grads` given the gradient of
/// the loss with respect to the logits.
pub fn backward(
    weights: &ModelWeights,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    grads: &mut ModelGrads,
) {
    let n_heads = weights.config.n_heads;
    let hd = weights.config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // Unembedding and final norm.
    let d_a_f = dlogits.dot(&weights.unembed.t());
    let mut dx = ln_backward(&d_a_f, &cache.ln_f, &weights.ln_f);

    for (li, layer) in weights.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];
        let t = lc.attn.a.nrows();

        // MLP block: x_out = x_mid + down(gelu(up(m))).
        let mut d_x_mid = dx.clone();
        let d_act = dx.dot(&layer.mlp.down.weight);
        let mut d_up_pre = d_act;
        d_up_pre.zip_mut_with(&lc.up_pre, |g, &pre| *g *= gelu_prime(pre));
        let d_m = d_up_pre.dot(&layer.mlp.up.weight);
        d_x_mid += &ln_backward(&d_m, &lc.ln2, &layer.ln2);

        // Attention block: x_mid = x_in + out(ctx).
        let mut d_x_in = d_x_mid.clone();
        let d_ctx = d_x_mid.dot(&layer.attn.out.weight);

        let d = weights.config.d_model;
        let mut d_q = Array2::<f64>::zeros((t, d));
        let mut d_k = Array2::<f64>::zeros((t, d));
        let mut d_v = Array2::<f64>::zeros((t, d));
        for h in 0..n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = lc.attn.q.slice(cols);
            let kh = lc.attn.k.slice(cols);
            let vh = lc.attn.v.slice(cols);
            let p = &lc.attn.probs[h];
            let d_ctx_h = d_ctx.slice(cols);

            let d_p = d_ctx_h.dot(&vh.t());
            d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));

            // Softmax backward per row; masked entries have p = 0 and stay 0.
            let inner = (&d_p * p).sum_axis(Axis(1));
            let mut d_scores = d_p;
            for i in 0..t {
                for j in 0..t {
                    d_scores[(i, j)] = p[(i, j)] * (d_scores[(i, j)] - inner[i]);
                }
            }
            let mut d_qh = d_scores.dot(&kh);
            d_qh *= scale;
            d_q.slice_mut(cols).assign(&d_qh);
            let mut d_kh = d_scores.t().dot(&qh);
            d_kh *= scale;
            d_k.slice_mut(cols).assign(&d_kh);
        }

        let mut d_a = proj_backward(&layer.attn.q, &lc.attn.a, &lc.attn.q_cache, &d_q, &mut lg.q);
        d_a += &proj_backward(&layer.attn.k, &lc.attn.a, &lc.attn.k_cache, &d_k, &mut lg.k);
        d_a += &proj_backward(&layer.attn.v, &lc.attn.a, &lc.attn.v_cache, &d_v, &mut lg.v);

        d_x_in += &ln_backward(&d_a, &lc.ln1, &layer.ln1);
        dx = d_x_in;
    }
}
