//! Low-rank adapters for one linear layer.
//!
//! Two adapter families are implemented behind the same base layer:
//!
//! - The modulated/shared adapter: a preference-agnostic branch
//!   `ΔW = B1 W1 A1` added to the base weight, plus a modulation branch that
//!   derives a per-feature scale `γ` and shift `η` from the mixed preference
//!   embedding `o'` through shared low-rank factors `B2, A2` and two core
//!   tensors. Output: `(γ + 1) ⊙ ((W_base + B1 W1 A1) h) + η + b`.
//! - A bilinear baseline: preference-specific core tensors mixed by the raw
//!   preference weights, `(W_base + B1 W1 A1 + B2 (Σ_i α_i W2_i) A2) h + b`.
//!
//! The modulated adapter merges exactly: for a fixed `o'` the whole layer
//! collapses to a plain affine map (`merge`), so conditioned inference costs
//! nothing extra.

use ndarray::{Array1, Array2, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preference::PreferenceVector;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch for {tensor}: expected {expected}, got {got}")]
    ShapeMismatch {
        tensor: &'static str,
        expected: String,
        got: String,
    },
    #[error("preference vector has {got} components, adapter expects {expected}")]
    CoreCountMismatch { expected: usize, got: usize },
}

/// Dimensions of one adapted linear layer.
///
/// `m`/`n` are the output/input dimensions of the base weight, `r1` the rank
/// of the preference-agnostic branch, `r2` the rank of the modulation branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub m: usize,
    pub n: usize,
    pub r1: usize,
    pub r2: usize,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.m == 0 || self.n == 0 {
            return Err(AdapterError::InvalidConfig(format!(
                "m and n must be positive, got m={} n={}",
                self.m, self.n
            )));
        }
        if self.r1 + self.r2 == 0 {
            return Err(AdapterError::InvalidConfig(
                "r1 + r2 must be at least 1".into(),
            ));
        }
        let cap = self.m.min(self.n);
        if self.r1 > cap || self.r2 > cap {
            return Err(AdapterError::InvalidConfig(format!(
                "ranks must not exceed min(m, n) = {cap}, got r1={} r2={}",
                self.r1, self.r2
            )));
        }
        Ok(())
    }
}

/// Which adapter family a layer carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterKind {
    #[serde(rename = "moslora")]
    MoSLora,
    #[serde(rename = "pblora")]
    PbLora,
}

/// Weights of the modulated/shared adapter.
///
/// Generic over the element type; double precision is the default, single
/// precision is available with relaxed tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct MoSLoraWeights<F = f64> {
    /// r1×n down-projection of the shared branch.
    pub a1: Array2<F>,
    /// r1×r1 core tensor of the shared branch.
    pub w1: Array2<F>,
    /// m×r1 up-projection of the shared branch (zero at init).
    pub b1: Array2<F>,
    /// r2×n down-projection of the modulation branch.
    pub a2: Array2<F>,
    /// m×r2 up-projection of the modulation branch (zero at init).
    pub b2: Array2<F>,
    /// r2×r2 core tensor producing the scale vector.
    pub w_gamma: Array2<F>,
    /// r2×r2 core tensor producing the shift vector.
    pub w_eta: Array2<F>,
}

/// Weights of the bilinear baseline adapter with k preference-specific cores.
#[derive(Debug, Clone, PartialEq)]
pub struct PbLoraWeights<F = f64> {
    pub a1: Array2<F>,
    pub w1: Array2<F>,
    pub b1: Array2<F>,
    pub a2: Array2<F>,
    pub b2: Array2<F>,
    /// k core tensors, each r2×r2, mixed by the preference weights.
    pub w2: Vec<Array2<F>>,
}

/// Either adapter family, as produced by [`init`].
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterWeights<F = f64> {
    MoSLora(MoSLoraWeights<F>),
    PbLora(PbLoraWeights<F>),
}

/// A conditioned layer collapsed to a plain affine map, valid only for the
/// mixed preference it was merged with.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLayer<F = f64> {
    pub w_tilde: Array2<F>,
    pub b_prime: Array1<F>,
}

impl<F: NdFloat> MergedLayer<F> {
    pub fn apply(&self, h: &Array1<F>) -> Array1<F> {
        self.w_tilde.dot(h) + &self.b_prime
    }

    /// Row-wise application to a stack of inputs (T×n → T×m).
    pub fn apply_seq(&self, h: &Array2<F>) -> Array2<F> {
        let mut out = h.dot(&self.w_tilde.t());
        out += &self.b_prime;
        out
    }
}

fn check_dim2<F>(
    tensor: &'static str,
    arr: &Array2<F>,
    rows: usize,
    cols: usize,
) -> Result<(), AdapterError> {
    if arr.nrows() != rows || arr.ncols() != cols {
        return Err(AdapterError::ShapeMismatch {
            tensor,
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", arr.nrows(), arr.ncols()),
        });
    }
    Ok(())
}

fn check_dim1<F>(tensor: &'static str, arr: &Array1<F>, len: usize) -> Result<(), AdapterError> {
    if arr.len() != len {
        return Err(AdapterError::ShapeMismatch {
            tensor,
            expected: format!("{len}"),
            got: format!("{}", arr.len()),
        });
    }
    Ok(())
}

impl<F: NdFloat> MoSLoraWeights<F> {
    /// Checks every tensor against the given layer dimensions.
    pub fn check_shapes(&self, m: usize, n: usize) -> Result<(), AdapterError> {
        let r1 = self.a1.nrows();
        let r2 = self.a2.nrows();
        check_dim2("A1", &self.a1, r1, n)?;
        check_dim2("W1", &self.w1, r1, r1)?;
        check_dim2("B1", &self.b1, m, r1)?;
        check_dim2("A2", &self.a2, r2, n)?;
        check_dim2("B2", &self.b2, m, r2)?;
        check_dim2("W_gamma", &self.w_gamma, r2, r2)?;
        check_dim2("W_eta", &self.w_eta, r2, r2)?;
        Ok(())
    }

    /// The shared-branch weight update `B1 W1 A1` (m×n).
    pub fn delta_w(&self) -> Array2<F> {
        self.b1.dot(&self.w1).dot(&self.a1)
    }

    /// Modulation vectors `(γ, η)` for a mixed preference embedding.
    pub fn modulation(&self, o_mixed: &Array1<F>) -> (Array1<F>, Array1<F>) {
        let u = self.a2.dot(o_mixed);
        let gamma = self.b2.dot(&self.w_gamma.dot(&u));
        let eta = self.b2.dot(&self.w_eta.dot(&u));
        (gamma, eta)
    }

    /// Number of scalar entries across all tensors.
    pub fn entry_count(&self) -> usize {
        self.a1.len()
            + self.w1.len()
            + self.b1.len()
            + self.a2.len()
            + self.b2.len()
            + self.w_gamma.len()
            + self.w_eta.len()
    }

    pub fn config(&self) -> AdapterConfig {
        AdapterConfig {
            m: self.b1.nrows(),
            n: self.a1.ncols(),
            r1: self.a1.nrows(),
            r2: self.a2.nrows(),
        }
    }

    /// Visits every tensor in a fixed order (paired with [`MoSLoraGrads`]).
    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Array2<F>)) {
        f(&mut self.a1);
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.a2);
        f(&mut self.b2);
        f(&mut self.w_gamma);
        f(&mut self.w_eta);
    }

    pub fn visit_tensors(&self, f: &mut impl FnMut(&Array2<F>)) {
        f(&self.a1);
        f(&self.w1);
        f(&self.b1);
        f(&self.a2);
        f(&self.b2);
        f(&self.w_gamma);
        f(&self.w_eta);
    }
}

impl<F: NdFloat> PbLoraWeights<F> {
    pub fn check_shapes(&self, m: usize, n: usize) -> Result<(), AdapterError> {
        let r1 = self.a1.nrows();
        let r2 = self.a2.nrows();
        check_dim2("A1", &self.a1, r1, n)?;
        check_dim2("W1", &self.w1, r1, r1)?;
        check_dim2("B1", &self.b1, m, r1)?;
        check_dim2("A2", &self.a2, r2, n)?;
        check_dim2("B2", &self.b2, m, r2)?;
        for w2 in &self.w2 {
            check_dim2("W2", w2, r2, r2)?;
        }
        Ok(())
    }

    /// Preference-mixed core `Σ_i α_i W2_i`.
    pub fn mixed_core(&self, alpha: &PreferenceVector) -> Result<Array2<F>, AdapterError> {
        if alpha.k() != self.w2.len() {
            return Err(AdapterError::CoreCountMismatch {
                expected: self.w2.len(),
                got: alpha.k(),
            });
        }
        let r2 = self.a2.nrows();
        let mut mixed = Array2::<F>::zeros((r2, r2));
        for (w, core) in alpha.components().iter().zip(&self.w2) {
            mixed.scaled_add(F::from(*w).expect("weight fits the element type"), core);
        }
        Ok(mixed)
    }

    /// Full weight update for a given preference vector (m×n).
    pub fn delta_w(&self, alpha: &PreferenceVector) -> Result<Array2<F>, AdapterError> {
        let shared = self.b1.dot(&self.w1).dot(&self.a1);
        let mixed = self.mixed_core(alpha)?;
        Ok(shared + self.b2.dot(&mixed).dot(&self.a2))
    }

    pub fn entry_count(&self) -> usize {
        self.a1.len()
            + self.w1.len()
            + self.b1.len()
            + self.a2.len()
            + self.b2.len()
            + self.w2.iter().map(|w| w.len()).sum::<usize>()
    }

    pub fn core_count(&self) -> usize {
        self.w2.len()
    }

    pub fn config(&self) -> AdapterConfig {
        AdapterConfig {
            m: self.b1.nrows(),
            n: self.a1.ncols(),
            r1: self.a1.nrows(),
            r2: self.a2.nrows(),
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Array2<F>)) {
        f(&mut self.a1);
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.a2);
        f(&mut self.b2);
        for w2 in &mut self.w2 {
            f(w2);
        }
    }

    pub fn visit_tensors(&self, f: &mut impl FnMut(&Array2<F>)) {
        f(&self.a1);
        f(&self.w1);
        f(&self.b1);
        f(&self.a2);
        f(&self.b2);
        for w2 in &self.w2 {
            f(w2);
        }
    }
}

fn random_matrix<F: NdFloat>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: F,
) -> Array2<F>
where
    StandardNormal: Distribution<F>,
{
    let normal = Normal::new(F::zero(), scale).expect("scale is finite");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Initializes a modulated/shared adapter.
///
/// Up-projections start at zero so the adapted layer is exactly the base
/// layer; down-projections and core tensors get small random entries.
pub fn init_moslora<F: NdFloat>(
    config: &AdapterConfig,
    seed: u64,
) -> Result<MoSLoraWeights<F>, AdapterError>
where
    StandardNormal: Distribution<F>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let of = |x: f64| F::from(x).expect("scale fits the element type");
    let a_scale = of(1.0 / (config.n as f64).sqrt());
    let w1_scale = of(1.0 / (config.r1.max(1) as f64).sqrt());
    let w2_scale = of(1.0 / (config.r2.max(1) as f64).sqrt());
    Ok(MoSLoraWeights {
        a1: random_matrix(&mut rng, config.r1, config.n, a_scale),
        w1: random_matrix(&mut rng, config.r1, config.r1, w1_scale),
        b1: Array2::zeros((config.m, config.r1)),
        a2: random_matrix(&mut rng, config.r2, config.n, a_scale),
        b2: Array2::zeros((config.m, config.r2)),
        w_gamma: random_matrix(&mut rng, config.r2, config.r2, w2_scale),
        w_eta: random_matrix(&mut rng, config.r2, config.r2, w2_scale),
    })
}

/// Initializes the bilinear baseline with `k` preference-specific cores.
pub fn init_pblora<F: NdFloat>(
    config: &AdapterConfig,
    k: usize,
    seed: u64,
) -> Result<PbLoraWeights<F>, AdapterError>
where
    StandardNormal: Distribution<F>,
{
    config.validate()?;
    if k == 0 {
        return Err(AdapterError::InvalidConfig("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let of = |x: f64| F::from(x).expect("scale fits the element type");
    let a_scale = of(1.0 / (config.n as f64).sqrt());
    let w1_scale = of(1.0 / (config.r1.max(1) as f64).sqrt());
    let w2_scale = of(1.0 / (config.r2.max(1) as f64).sqrt());
    Ok(PbLoraWeights {
        a1: random_matrix(&mut rng, config.r1, config.n, a_scale),
        w1: random_matrix(&mut rng, config.r1, config.r1, w1_scale),
        b1: Array2::zeros((config.m, config.r1)),
        a2: random_matrix(&mut rng, config.r2, config.n, a_scale),
        b2: Array2::zeros((config.m, config.r2)),
        w2: (0..k)
            .map(|_| random_matrix(&mut rng, config.r2, config.r2, w2_scale))
            .collect(),
    })
}

/// Kind-dispatching initializer; `k` is only consulted for the bilinear kind.
pub fn init<F: NdFloat>(
    config: &AdapterConfig,
    kind: AdapterKind,
    k: usize,
    seed: u64,
) -> Result<AdapterWeights<F>, AdapterError>
where
    StandardNormal: Distribution<F>,
{
    match kind {
        AdapterKind::MoSLora => Ok(AdapterWeights::MoSLora(init_moslora(config, seed)?)),
        AdapterKind::PbLora => Ok(AdapterWeights::PbLora(init_pblora(config, k, seed)?)),
    }
}

/// Closed-form trainable-parameter count.
///
/// Modulated/shared: `(m + n)(r1 + r2) + r1² + 2 r2²`.
/// Bilinear with k cores: `(m + n)(r1 + r2) + r1² + k r2²`.
pub fn param_count(config: &AdapterConfig, kind: AdapterKind, k: usize) -> usize {
    let shared = (config.m + config.n) * (config.r1 + config.r2) + config.r1 * config.r1;
    match kind {
        AdapterKind::MoSLora => shared + 2 * config.r2 * config.r2,
        AdapterKind::PbLora => shared + k * config.r2 * config.r2,
    }
}

/// Per-sequence cache of intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct MoSLoraCache<F = f64> {
    /// Effective weight `W_base + B1 W1 A1` (m×n).
    pub m_eff: Array2<F>,
    /// Pre-modulation features, one row per position (T×m).
    pub h_prime: Array2<F>,
    /// The conditioning embedding the modulation was computed from.
    pub o_mixed: Array1<F>,
    /// `A2 o'` (r2).
    pub u: Array1<F>,
    /// `W_gamma u` (r2).
    pub s_gamma: Array1<F>,
    /// `W_eta u` (r2).
    pub s_eta: Array1<F>,
    pub gamma: Array1<F>,
    pub eta: Array1<F>,
}

/// Gradients of a scalar loss with respect to every modulated-adapter tensor.
#[derive(Debug, Clone)]
pub struct MoSLoraGrads {
    pub a1: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub a2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w_gamma: Array2<f64>,
    pub w_eta: Array2<f64>,
}

impl MoSLoraGrads {
    pub fn zeros_like(w: &MoSLoraWeights) -> Self {
        Self {
            a1: Array2::zeros(w.a1.raw_dim()),
            w1: Array2::zeros(w.w1.raw_dim()),
            b1: Array2::zeros(w.b1.raw_dim()),
            a2: Array2::zeros(w.a2.raw_dim()),
            b2: Array2::zeros(w.b2.raw_dim()),
            w_gamma: Array2::zeros(w.w_gamma.raw_dim()),
            w_eta: Array2::zeros(w.w_eta.raw_dim()),
        }
    }

    pub fn visit_tensors<'a>(&'a self, f: &mut impl FnMut(&'a Array2<f64>)) {
        f(&self.a1);
        f(&self.w1);
        f(&self.b1);
        f(&self.a2);
        f(&self.b2);
        f(&self.w_gamma);
        f(&self.w_eta);
    }
}

#[derive(Debug, Clone)]
pub struct PbLoraCache<F = f64> {
    /// Effective weight `W_base + ΔW(α)` (m×n).
    pub w_eff: Array2<F>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PbLoraGrads {
    pub a1: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub a2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w2: Vec<Array2<f64>>,
}

impl PbLoraGrads {
    pub fn zeros_like(w: &PbLoraWeights) -> Self {
        Self {
            a1: Array2::zeros(w.a1.raw_dim()),
            w1: Array2::zeros(w.w1.raw_dim()),
            b1: Array2::zeros(w.b1.raw_dim()),
            a2: Array2::zeros(w.a2.raw_dim()),
            b2: Array2::zeros(w.b2.raw_dim()),
            w2: w.w2.iter().map(|c| Array2::zeros(c.raw_dim())).collect(),
        }
    }

    pub fn visit_tensors<'a>(&'a self, f: &mut impl FnMut(&'a Array2<f64>)) {
        f(&self.a1);
        f(&self.w1);
        f(&self.b1);
        f(&self.a2);
        f(&self.b2);
        for w2 in &self.w2 {
            f(w2);
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Row-wise modulated forward over a stack of inputs (T×n → T×m).
pub fn moslora_forward_seq<F: NdFloat>(
    weights: &MoSLoraWeights<F>,
    w_base: &Array2<F>,
    b: &Array1<F>,
    h_in: &Array2<F>,
    o_mixed: &Array1<F>,
) -> Result<(Array2<F>, MoSLoraCache<F>), AdapterError> {
    let (m, n) = (w_base.nrows(), w_base.ncols());
    weights.check_shapes(m, n)?;
    check_dim1("b", b, m)?;
    check_dim2("h", h_in, h_in.nrows(), n)?;
    check_dim1("o_mixed", o_mixed, n)?;

    let m_eff = w_base + &weights.delta_w();
    let h_prime = h_in.dot(&m_eff.t());
    let u = weights.a2.dot(o_mixed);
    let s_gamma = weights.w_gamma.dot(&u);
    let s_eta = weights.w_eta.dot(&u);
    let gamma = weights.b2.dot(&s_gamma);
    let eta = weights.b2.dot(&s_eta);

    let scale = &gamma + F::one();
    let mut out = h_prime.clone();
    out *= &scale;
    out += &eta;
    out += b;
    Ok((
        out,
        MoSLoraCache {
            m_eff,
            h_prime,
            o_mixed: o_mixed.clone(),
            u,
            s_gamma,
            s_eta,
            gamma,
            eta,
        },
    ))
}

/// Backpropagates through [`moslora_forward_seq`], accumulating adapter
/// gradients and returning the gradient with respect to the input rows.
pub fn moslora_backward_seq(
    weights: &MoSLoraWeights,
    h_in: &Array2<f64>,
    cache: &MoSLoraCache,
    grad_out: &Array2<f64>,
    grads: &mut MoSLoraGrads,
) -> Array2<f64> {
    // Shift and scale receive the position-summed gradient.
    let d_eta: Array1<f64> = grad_out.sum_axis(Axis(0));
    let d_gamma: Array1<f64> = (grad_out * &cache.h_prime).sum_axis(Axis(0));
    let scale = &cache.gamma + 1.0;
    let g_hprime = grad_out * &scale;

    // Shared branch: dL/dM projected onto the low-rank factors.
    let g_m = g_hprime.t().dot(h_in);
    let w1a1 = weights.w1.dot(&weights.a1);
    grads.b1 += &g_m.dot(&w1a1.t());
    grads.w1 += &weights.b1.t().dot(&g_m).dot(&weights.a1.t());
    grads.a1 += &weights.b1.dot(&weights.w1).t().dot(&g_m);

    // Modulation branch; o' is frozen so no gradient flows into it.
    let d_s_gamma = weights.b2.t().dot(&d_gamma);
    let d_s_eta = weights.b2.t().dot(&d_eta);
    grads.b2 += &outer(&d_gamma, &cache.s_gamma);
    grads.b2 += &outer(&d_eta, &cache.s_eta);
    grads.w_gamma += &outer(&d_s_gamma, &cache.u);
    grads.w_eta += &outer(&d_s_eta, &cache.u);
    let d_u = weights.w_gamma.t().dot(&d_s_gamma) + weights.w_eta.t().dot(&d_s_eta);
    grads.a2 += &outer(&d_u, &cache.o_mixed);

    g_hprime.dot(&cache.m_eff)
}

/// Row-wise bilinear-baseline forward over a stack of inputs.
pub fn pblora_forward_seq<F: NdFloat>(
    weights: &PbLoraWeights<F>,
    w_base: &Array2<F>,
    b: &Array1<F>,
    h_in: &Array2<F>,
    alpha: &PreferenceVector,
) -> Result<(Array2<F>, PbLoraCache<F>), AdapterError> {
    let (m, n) = (w_base.nrows(), w_base.ncols());
    weights.check_shapes(m, n)?;
    check_dim1("b", b, m)?;
    check_dim2("h", h_in, h_in.nrows(), n)?;

    let w_eff = w_base + &weights.delta_w(alpha)?;
    let mut out = h_in.dot(&w_eff.t());
    out += b;
    Ok((
        out,
        PbLoraCache {
            w_eff,
            alpha: alpha.components().to_vec(),
        },
    ))
}

/// Backpropagates through [`pblora_forward_seq`].
pub fn pblora_backward_seq(
    weights: &PbLoraWeights,
    h_in: &Array2<f64>,
    cache: &PbLoraCache,
    grad_out: &Array2<f64>,
    grads: &mut PbLoraGrads,
) -> Array2<f64> {
    let g_w = grad_out.t().dot(h_in);

    let w1a1 = weights.w1.dot(&weights.a1);
    grads.b1 += &g_w.dot(&w1a1.t());
    grads.w1 += &weights.b1.t().dot(&g_w).dot(&weights.a1.t());
    grads.a1 += &weights.b1.dot(&weights.w1).t().dot(&g_w);

    let r2 = weights.a2.nrows();
    let mut w_bar = Array2::<f64>::zeros((r2, r2));
    for (w, core) in cache.alpha.iter().zip(&weights.w2) {
        w_bar.scaled_add(*w, core);
    }
    let w_bar_a2 = w_bar.dot(&weights.a2);
    grads.b2 += &g_w.dot(&w_bar_a2.t());
    let d_w_bar = weights.b2.t().dot(&g_w).dot(&weights.a2.t());
    for (dw2, &w) in grads.w2.iter_mut().zip(&cache.alpha) {
        dw2.scaled_add(w, &d_w_bar);
    }
    grads.a2 += &weights.b2.dot(&w_bar).t().dot(&g_w);

    grad_out.dot(&cache.w_eff)
}

/// Modulated forward for a single input vector.
pub fn moslora_forward<F: NdFloat>(
    weights: &MoSLoraWeights<F>,
    w_base: &Array2<F>,
    b: &Array1<F>,
    h: &Array1<F>,
    o_mixed: &Array1<F>,
) -> Result<Array1<F>, AdapterError> {
    let h_in = h.view().insert_axis(Axis(0)).to_owned();
    let (out, _) = moslora_forward_seq(weights, w_base, b, &h_in, o_mixed)?;
    Ok(out.row(0).to_owned())
}

/// Bilinear-baseline forward for a single input vector.
pub fn pblora_forward<F: NdFloat>(
    weights: &PbLoraWeights<F>,
    w_base: &Array2<F>,
    b: &Array1<F>,
    h: &Array1<F>,
    alpha: &PreferenceVector,
) -> Result<Array1<F>, AdapterError> {
    let h_in = h.view().insert_axis(Axis(0)).to_owned();
    let (out, _) = pblora_forward_seq(weights, w_base, b, &h_in, alpha)?;
    Ok(out.row(0).to_owned())
}

/// Collapses a modulated layer for a fixed `o'`:
/// `W̃ = diag(γ + 1)(W_base + B1 W1 A1)`, `b' = b + η`.
///
/// For the merged preference, `W̃ h + b'` equals the modulated forward for
/// every input `h`.
pub fn merge<F: NdFloat>(
    weights: &MoSLoraWeights<F>,
    w_base: &Array2<F>,
    b: &Array1<F>,
    o_mixed: &Array1<F>,
) -> Result<MergedLayer<F>, AdapterError> {
    let (m, n) = (w_base.nrows(), w_base.ncols());
    weights.check_shapes(m, n)?;
    check_dim1("b", b, m)?;
    check_dim1("o_mixed", o_mixed, n)?;

    let m_eff = w_base + &weights.delta_w();
    let (gamma, eta) = weights.modulation(o_mixed);
    let scale = &gamma + F::one();
    // Row i of W̃ is row i of the effective weight scaled by (γ_i + 1).
    let mut w_tilde = m_eff;
    for (mut row, &s) in w_tilde.rows_mut().into_iter().zip(scale.iter()) {
        row *= s;
    }
    Ok(MergedLayer {
        w_tilde,
        b_prime: b + &eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Fully random (non-init) adapter so no block is zero.
    fn dense_moslora(rng: &mut ChaCha8Rng, cfg: &AdapterConfig) -> MoSLoraWeights {
        MoSLoraWeights {
            a1: rand_mat(rng, cfg.r1, cfg.n),
            w1: rand_mat(rng, cfg.r1, cfg.r1),
            b1: rand_mat(rng, cfg.m, cfg.r1),
            a2: rand_mat(rng, cfg.r2, cfg.n),
            b2: rand_mat(rng, cfg.m, cfg.r2),
            w_gamma: rand_mat(rng, cfg.r2, cfg.r2),
            w_eta: rand_mat(rng, cfg.r2, cfg.r2),
        }
    }

    fn dense_pblora(rng: &mut ChaCha8Rng, cfg: &AdapterConfig, k: usize) -> PbLoraWeights {
        PbLoraWeights {
            a1: rand_mat(rng, cfg.r1, cfg.n),
            w1: rand_mat(rng, cfg.r1, cfg.r1),
            b1: rand_mat(rng, cfg.m, cfg.r1),
            a2: rand_mat(rng, cfg.r2, cfg.n),
            b2: rand_mat(rng, cfg.m, cfg.r2),
            w2: (0..k).map(|_| rand_mat(rng, cfg.r2, cfg.r2)).collect(),
        }
    }

    /// Index-loop matrix product, independent of ndarray's dot.
    fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (m, inner) = (a.nrows(), a.ncols());
        let n = b.ncols();
        assert_eq!(inner, b.nrows());
        let mut out = Array2::<f64>::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..inner {
                    acc += a[(i, l)] * b[(l, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn naive_matvec(a: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(a.nrows());
        for i in 0..a.nrows() {
            let mut acc = 0.0;
            for j in 0..a.ncols() {
                acc += a[(i, j)] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    #[test]
    fn fresh_init_reduces_to_base_layer() {
        let cfg = AdapterConfig {
            m: 5,
            n: 5,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w_base = rand_mat(&mut rng, 5, 5);
        let b = rand_vec(&mut rng, 5);
        let h = rand_vec(&mut rng, 5);
        let o = rand_vec(&mut rng, 5);

        let mos: MoSLoraWeights = init_moslora(&cfg, 9).unwrap();
        let out = moslora_forward(&mos, &w_base, &b, &h, &o).unwrap();
        let expect = w_base.dot(&h) + &b;
        assert_eq!(out, expect);

        let pb: PbLoraWeights = init_pblora(&cfg, 2, 9).unwrap();
        let alpha = PreferenceVector::new(vec![0.4, 0.6]).unwrap();
        let out = pblora_forward(&pb, &w_base, &b, &h, &alpha).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn unit_gamma_doubles_the_base_output() {
        // m = n = 2, r1 = r2 = 1, identity base, zero bias. Pick the
        // modulation branch so γ = (1, 1) and η = (0, 0).
        let weights = MoSLoraWeights {
            a1: array![[0.0, 0.0]],
            w1: array![[0.0]],
            b1: array![[0.0], [0.0]],
            a2: array![[1.0, 0.0]],
            b2: array![[1.0], [1.0]],
            w_gamma: array![[1.0]],
            w_eta: array![[0.0]],
        };
        let w_base: Array2<f64> = Array2::eye(2);
        let b = Array1::zeros(2);
        let o = array![1.0, 0.0];
        let h = array![0.3, -1.7];
        let out = moslora_forward(&weights, &w_base, &b, &h, &o).unwrap();
        assert!((out[0] - 2.0 * h[0]).abs() < 1e-15);
        assert!((out[1] - 2.0 * h[1]).abs() < 1e-15);
    }

    #[test]
    fn moslora_matches_dense_oracle() {
        let cfg = AdapterConfig {
            m: 3,
            n: 3,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = dense_moslora(&mut rng, &cfg);
        let w_base = rand_mat(&mut rng, 3, 3);
        let b = rand_vec(&mut rng, 3);
        let h = rand_vec(&mut rng, 3);
        let o = rand_vec(&mut rng, 3);

        let out = moslora_forward(&weights, &w_base, &b, &h, &o).unwrap();

        // Oracle: materialize every intermediate with index loops.
        let delta = naive_matmul(&naive_matmul(&weights.b1, &weights.w1), &weights.a1);
        let m_eff = &w_base + &delta;
        let h_prime = naive_matvec(&m_eff, &h);
        let u = naive_matvec(&weights.a2, &o);
        let gamma = naive_matvec(&weights.b2, &naive_matvec(&weights.w_gamma, &u));
        let eta = naive_matvec(&weights.b2, &naive_matvec(&weights.w_eta, &u));
        for i in 0..3 {
            let expect = (gamma[i] + 1.0) * h_prime[i] + eta[i] + b[i];
            let rel = (out[i] - expect).abs() / expect.abs().max(1e-12);
            assert!(rel < 1e-6, "component {i}: {} vs {expect}", out[i]);
        }
    }

    #[test]
    fn pblora_matches_dense_oracle_and_vertex_selects_one_core() {
        let cfg = AdapterConfig {
            m: 4,
            n: 3,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let weights = dense_pblora(&mut rng, &cfg, 2);
        let w_base = rand_mat(&mut rng, 4, 3);
        let b = rand_vec(&mut rng, 4);
        let h = rand_vec(&mut rng, 3);

        let alpha = PreferenceVector::new(vec![0.25, 0.75]).unwrap();
        let out = pblora_forward(&weights, &w_base, &b, &h, &alpha).unwrap();
        let mut w_bar = Array2::<f64>::zeros((2, 2));
        for (i, core) in weights.w2.iter().enumerate() {
            w_bar.scaled_add(alpha.components()[i], core);
        }
        let delta = naive_matmul(&naive_matmul(&weights.b1, &weights.w1), &weights.a1)
            + naive_matmul(&naive_matmul(&weights.b2, &w_bar), &weights.a2);
        let expect = naive_matvec(&(&w_base + &delta), &h) + &b;
        for i in 0..4 {
            let rel = (out[i] - expect[i]).abs() / expect[i].abs().max(1e-12);
            assert!(rel < 1e-6);
        }

        // Vertex picks out the first core exactly.
        let vertex = PreferenceVector::vertex(2, 0);
        let out_vertex = pblora_forward(&weights, &w_base, &b, &h, &vertex).unwrap();
        let single = PbLoraWeights {
            w2: vec![weights.w2[0].clone()],
            ..weights.clone()
        };
        let out_single =
            pblora_forward(&single, &w_base, &b, &h, &PreferenceVector::vertex(1, 0)).unwrap();
        for i in 0..4 {
            assert!((out_vertex[i] - out_single[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pblora_with_equal_cores_ignores_alpha() {
        let cfg = AdapterConfig {
            m: 3,
            n: 3,
            r1: 1,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut weights = dense_pblora(&mut rng, &cfg, 3);
        let shared_core = weights.w2[0].clone();
        for w2 in weights.w2.iter_mut() {
            w2.assign(&shared_core);
        }
        let w_base = rand_mat(&mut rng, 3, 3);
        let b = rand_vec(&mut rng, 3);
        let h = rand_vec(&mut rng, 3);
        let a = PreferenceVector::new(vec![0.1, 0.2, 0.7]).unwrap();
        let b_vec = PreferenceVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        let out_a = pblora_forward(&weights, &w_base, &b, &h, &a).unwrap();
        let out_b = pblora_forward(&weights, &w_base, &b, &h, &b_vec).unwrap();
        for i in 0..3 {
            assert!((out_a[i] - out_b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pblora_is_affine_in_alpha() {
        let cfg = AdapterConfig {
            m: 4,
            n: 4,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let weights = dense_pblora(&mut rng, &cfg, 3);
        let w_base = rand_mat(&mut rng, 4, 4);
        let b = rand_vec(&mut rng, 4);
        let h = rand_vec(&mut rng, 4);
        let a = PreferenceVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        let c = PreferenceVector::new(vec![0.1, 0.1, 0.8]).unwrap();
        let lam = 0.3;
        let blend = PreferenceVector::new(
            a.components()
                .iter()
                .zip(c.components())
                .map(|(x, y)| lam * x + (1.0 - lam) * y)
                .collect(),
        )
        .unwrap();
        let f_blend = pblora_forward(&weights, &w_base, &b, &h, &blend).unwrap();
        let f_a = pblora_forward(&weights, &w_base, &b, &h, &a).unwrap();
        let f_c = pblora_forward(&weights, &w_base, &b, &h, &c).unwrap();
        for i in 0..4 {
            let expect = lam * f_a[i] + (1.0 - lam) * f_c[i];
            assert!((f_blend[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn merge_identity_on_fresh_init() {
        let cfg = AdapterConfig {
            m: 6,
            n: 6,
            r1: 3,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w_base = rand_mat(&mut rng, 6, 6);
        let b = rand_vec(&mut rng, 6);
        let o = rand_vec(&mut rng, 6);
        let weights = init_moslora(&cfg, 0).unwrap();
        let merged = merge(&weights, &w_base, &b, &o).unwrap();
        assert_eq!(merged.w_tilde, w_base);
        assert_eq!(merged.b_prime, b);
    }

    #[test]
    fn merge_matches_forward_over_random_inputs() {
        let cfg = AdapterConfig {
            m: 8,
            n: 8,
            r1: 3,
            r2: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights = dense_moslora(&mut rng, &cfg);
        let w_base = rand_mat(&mut rng, 8, 8);
        let b = rand_vec(&mut rng, 8);
        let o = rand_vec(&mut rng, 8);
        let merged = merge(&weights, &w_base, &b, &o).unwrap();
        for _ in 0..100 {
            let h = rand_vec(&mut rng, 8);
            let direct = moslora_forward(&weights, &w_base, &b, &h, &o).unwrap();
            let via_merge = merged.apply(&h);
            for i in 0..8 {
                assert!((direct[i] - via_merge[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn merged_layer_is_locked_to_its_preference() {
        let cfg = AdapterConfig {
            m: 4,
            n: 4,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let weights = dense_moslora(&mut rng, &cfg);
        let w_base = rand_mat(&mut rng, 4, 4);
        let b = rand_vec(&mut rng, 4);
        let o1 = rand_vec(&mut rng, 4);
        let o2 = rand_vec(&mut rng, 4);
        let h = rand_vec(&mut rng, 4);
        let merged = merge(&weights, &w_base, &b, &o1).unwrap();
        let fwd_o2 = moslora_forward(&weights, &w_base, &b, &h, &o2).unwrap();
        let fwd_o1 = moslora_forward(&weights, &w_base, &b, &h, &o1).unwrap();
        // Forward responds to the new preference; the merged layer does not.
        assert!((&fwd_o1 - &fwd_o2).iter().any(|d| d.abs() > 1e-9));
        let via = merged.apply(&h);
        for i in 0..4 {
            assert!((via[i] - fwd_o1[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn modulation_locality() {
        let cfg = AdapterConfig {
            m: 5,
            n: 5,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut weights = dense_moslora(&mut rng, &cfg);
        let w_base = rand_mat(&mut rng, 5, 5);
        let b = rand_vec(&mut rng, 5);
        let h = rand_vec(&mut rng, 5);
        let o1 = rand_vec(&mut rng, 5);
        let o2 = rand_vec(&mut rng, 5);

        // With B2 = 0 the output is independent of the preference embedding.
        weights.b2.fill(0.0);
        let a = moslora_forward(&weights, &w_base, &b, &h, &o1).unwrap();
        let c = moslora_forward(&weights, &w_base, &b, &h, &o2).unwrap();
        assert_eq!(a, c);

        // With B1 = 0 the preference acts only through (γ, η): the output
        // is exactly (γ+1) ⊙ (W_base h) + η + b.
        let mut weights = dense_moslora(&mut rng, &cfg);
        weights.b1.fill(0.0);
        let out = moslora_forward(&weights, &w_base, &b, &h, &o1).unwrap();
        let (gamma, eta) = weights.modulation(&o1);
        let base_h = w_base.dot(&h);
        for i in 0..5 {
            let expect = (gamma[i] + 1.0) * base_h[i] + eta[i] + b[i];
            assert!((out[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_matches_published_formulas() {
        let big = AdapterConfig {
            m: 4096,
            n: 4096,
            r1: 4,
            r2: 4,
        };
        assert_eq!(param_count(&big, AdapterKind::MoSLora, 0), 65_584);
        // With two cores the bilinear baseline has the same size.
        assert_eq!(param_count(&big, AdapterKind::PbLora, 2), 65_584);
        let mod_only = AdapterConfig {
            m: 4096,
            n: 4096,
            r1: 0,
            r2: 8,
        };
        assert_eq!(param_count(&mod_only, AdapterKind::MoSLora, 0), 65_664);
    }

    #[test]
    fn param_count_equals_actual_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let m = rng.gen_range(2..40);
            let n = rng.gen_range(2..40);
            let cap = m.min(n);
            let r1 = rng.gen_range(0..=cap);
            let r2 = if r1 == 0 {
                rng.gen_range(1..=cap)
            } else {
                rng.gen_range(0..=cap)
            };
            let k = rng.gen_range(1..5);
            let cfg = AdapterConfig { m, n, r1, r2 };
            let mos: MoSLoraWeights = init_moslora(&cfg, 0).unwrap();
            assert_eq!(mos.entry_count(), param_count(&cfg, AdapterKind::MoSLora, 0));
            let pb: PbLoraWeights = init_pblora(&cfg, k, 0).unwrap();
            assert_eq!(pb.entry_count(), param_count(&cfg, AdapterKind::PbLora, k));
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = AdapterConfig {
            m: 6,
            n: 6,
            r1: 2,
            r2: 2,
        };
        let a: MoSLoraWeights = init_moslora(&cfg, 42).unwrap();
        let b: MoSLoraWeights = init_moslora(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c: MoSLoraWeights = init_moslora(&cfg, 43).unwrap();
        assert!(a.a1.iter().zip(c.a1.iter()).any(|(x, y)| x != y));
        assert!(a.b1.iter().all(|&v| v == 0.0));
        assert!(a.b2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_the_offending_tensor() {
        let cfg = AdapterConfig {
            m: 4,
            n: 4,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut weights = dense_moslora(&mut rng, &cfg);
        weights.w_gamma = rand_mat(&mut rng, 3, 3);
        let w_base = rand_mat(&mut rng, 4, 4);
        let b = rand_vec(&mut rng, 4);
        let h = rand_vec(&mut rng, 4);
        let o = rand_vec(&mut rng, 4);
        let err = moslora_forward(&weights, &w_base, &b, &h, &o).unwrap_err();
        assert!(err.to_string().contains("W_gamma"), "{err}");
    }

    #[test]
    fn rank_zero_branches_are_supported() {
        // r1 = 0: only the modulation branch exists.
        let cfg = AdapterConfig {
            m: 4,
            n: 4,
            r1: 0,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let weights = dense_moslora(&mut rng, &cfg);
        let w_base = rand_mat(&mut rng, 4, 4);
        let b = rand_vec(&mut rng, 4);
        let h = rand_vec(&mut rng, 4);
        let o = rand_vec(&mut rng, 4);
        let out = moslora_forward(&weights, &w_base, &b, &h, &o).unwrap();
        let (gamma, eta) = weights.modulation(&o);
        let base_h = w_base.dot(&h);
        for i in 0..4 {
            let expect = (gamma[i] + 1.0) * base_h[i] + eta[i] + b[i];
            assert!((out[i] - expect).abs() < 1e-12);
        }

        // r2 = 0: a plain low-rank update, independent of o'.
        let cfg = AdapterConfig {
            m: 4,
            n: 4,
            r1: 2,
            r2: 0,
        };
        let weights = dense_moslora(&mut rng, &cfg);
        let o2 = rand_vec(&mut rng, 4);
        let a = moslora_forward(&weights, &w_base, &b, &h, &o).unwrap();
        let c = moslora_forward(&weights, &w_base, &b, &h, &o2).unwrap();
        assert_eq!(a, c);
    }

    /// Central-difference check of the sequence backward pass: a random
    /// linear functional of the outputs, differentiated with respect to
    /// every adapter tensor.
    #[test]
    #[allow(clippy::needless_range_loop)] // index selects the perturbed tensor
    fn moslora_gradients_match_finite_differences() {
        let cfg = AdapterConfig {
            m: 5,
            n: 4,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let weights = dense_moslora(&mut rng, &cfg);
        let w_base = rand_mat(&mut rng, 5, 4);
        let b = rand_vec(&mut rng, 5);
        let h_in = rand_mat(&mut rng, 3, 4);
        let o = rand_vec(&mut rng, 4);
        let probe = rand_mat(&mut rng, 3, 5);

        let loss = |w: &MoSLoraWeights| -> f64 {
            let (out, _) = moslora_forward_seq(w, &w_base, &b, &h_in, &o).unwrap();
            (&out * &probe).sum()
        };

        let (_, cache) = moslora_forward_seq(&weights, &w_base, &b, &h_in, &o).unwrap();
        let mut grads = MoSLoraGrads::zeros_like(&weights);
        moslora_backward_seq(&weights, &h_in, &cache, &probe, &mut grads);

        let mut analytic: Vec<Array2<f64>> = Vec::new();
        grads.visit_tensors(&mut |g| analytic.push(g.clone()));
        let names = ["A1", "W1", "B1", "A2", "B2", "W_gamma", "W_eta"];

        let step = 1e-5;
        for (ti, name) in names.iter().enumerate() {
            let shape = analytic[ti].raw_dim();
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    let mut plus = weights.clone();
                    let mut minus = weights.clone();
                    {
                        let mut idx = 0;
                        plus.visit_tensors_mut(&mut |t| {
                            if idx == ti {
                                t[(i, j)] += step;
                            }
                            idx += 1;
                        });
                        let mut idx = 0;
                        minus.visit_tensors_mut(&mut |t| {
                            if idx == ti {
                                t[(i, j)] -= step;
                            }
                            idx += 1;
                        });
                    }
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
                    let exact = analytic[ti][(i, j)];
                    let rel = (numeric - exact).abs() / exact.abs().max(1e-8);
                    assert!(rel < 1e-3, "{name}[{i},{j}]: analytic {exact}, fd {numeric}");
                }
            }
        }
    }

    #[test]
    fn merge_identity_holds_in_single_precision() {
        // Same contract at f32, with the relaxed tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut rand_mat32 =
            |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0f32..1.0));
        let weights = MoSLoraWeights::<f32> {
            a1: rand_mat32(2, 6),
            w1: rand_mat32(2, 2),
            b1: rand_mat32(6, 2),
            a2: rand_mat32(2, 6),
            b2: rand_mat32(6, 2),
            w_gamma: rand_mat32(2, 2),
            w_eta: rand_mat32(2, 2),
        };
        let w_base = rand_mat32(6, 6);
        let mut rng2 = ChaCha8Rng::seed_from_u64(62);
        let mut rand_vec32 =
            |n: usize| Array1::from_shape_fn(n, |_| rng2.gen_range(-1.0f32..1.0));
        let b = rand_vec32(6);
        let o = rand_vec32(6);
        let merged = merge(&weights, &w_base, &b, &o).unwrap();
        for _ in 0..100 {
            let h = rand_vec32(6);
            let direct = moslora_forward(&weights, &w_base, &b, &h, &o).unwrap();
            let collapsed = merged.apply(&h);
            for i in 0..6 {
                assert!((direct[i] - collapsed[i]).abs() <= 1e-5);
            }
        }
        // Single-precision initialization is available behind the same API.
        let cfg = AdapterConfig {
            m: 6,
            n: 6,
            r1: 2,
            r2: 2,
        };
        let fresh: MoSLoraWeights<f32> = init_moslora(&cfg, 3).unwrap();
        assert!(fresh.b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // index selects the perturbed tensor
    fn pblora_gradients_match_finite_differences() {
        let cfg = AdapterConfig {
            m: 4,
            n: 4,
            r1: 2,
            r2: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let weights = dense_pblora(&mut rng, &cfg, 2);
        let w_base = rand_mat(&mut rng, 4, 4);
        let b = rand_vec(&mut rng, 4);
        let h_in = rand_mat(&mut rng, 3, 4);
        let alpha = PreferenceVector::new(vec![0.35, 0.65]).unwrap();
        let probe = rand_mat(&mut rng, 3, 4);

        let loss = |w: &PbLoraWeights| -> f64 {
            let (out, _) = pblora_forward_seq(w, &w_base, &b, &h_in, &alpha).unwrap();
            (&out * &probe).sum()
        };

        let (_, cache) = pblora_forward_seq(&weights, &w_base, &b, &h_in, &alpha).unwrap();
        let mut grads = PbLoraGrads::zeros_like(&weights);
        pblora_backward_seq(&weights, &h_in, &cache, &probe, &mut grads);

        let mut analytic: Vec<Array2<f64>> = Vec::new();
        grads.visit_tensors(&mut |g| analytic.push(g.clone()));

        let step = 1e-5;
        for ti in 0..analytic.len() {
            let shape = analytic[ti].raw_dim();
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    let mut plus = weights.clone();
                    let mut minus = weights.clone();
                    let mut idx = 0;
                    plus.visit_tensors_mut(&mut |t| {
                        if idx == ti {
                            t[(i, j)] += step;
                        }
                        idx += 1;
                    });
                    idx = 0;
                    minus.visit_tensors_mut(&mut |t| {
                        if idx == ti {
                            t[(i, j)] -= step;
                        }
                        idx += 1;
                    });
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
                    let exact = analytic[ti][(i, j)];
                    let rel = (numeric - exact).abs() / exact.abs().max(1e-8);
                    assert!(rel < 1e-3, "tensor {ti} [{i},{j}]");
                }
            }
        }
    }
}
