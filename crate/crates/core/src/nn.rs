//! Minimal reverse-mode differentiation for the actor/critic networks.
//!
//! Just enough machinery for SAC: dense layers with ReLU, a tanh-squashed
//! Gaussian policy head with its exact log-density (including the tanh
//! change-of-variables correction), and Adam. Batches are matrices with one
//! sample per column, double precision throughout.
//!
//! Conventions:
//! * `forward` is pure; `forward_train` records the activations needed by
//!   `backward`, which consumes that record and accumulates parameter
//!   gradients (call `zero_grad` between update rounds).
//! * ReLU uses subgradient 0 at exactly zero input.
//! * Any non-finite value encountered in a forward/backward pass or a
//!   gradient fed to Adam raises immediately.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp bounds for the policy head's raw log-std output.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Guard inside the tanh log-density correction `ln(1 − a² + ε)`.
pub const TANH_EPS: f64 = 1e-6;

const LN_2PI: f64 = 1.837877066409345;

fn ensure_finite_mat(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// A dense layer `y = Wx + b` with gradient accumulators.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub gw: DMatrix<f64>,
    pub gb: DVector<f64>,
}

impl Linear {
    /// Fan-in uniform initialization `U(−s/√fan_in, s/√fan_in)` for weights
    /// and biases; `scale` shrinks the band (used to start the actor's final
    /// layer near zero).
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        let mut draw = || rng.random::<f64>() * 2.0 * bound - bound;
        Self {
            w: DMatrix::from_fn(fan_out, fan_in, |_, _| draw()),
            b: DVector::from_fn(fan_out, |_, _| draw()),
            gw: DMatrix::zeros(fan_out, fan_in),
            gb: DVector::zeros(fan_out),
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.w * x;
        for mut col in out.column_iter_mut() {
            col += &self.b;
        }
        out
    }
}

/// Multilayer perceptron: dense layers with ReLU between them and a linear
/// output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Pre-activations of the last `forward_train`, consumed by `backward`.
    trace: Option<Trace>,
}

#[derive(Debug, Clone)]
struct Trace {
    input: DMatrix<f64>,
    /// Pre-activation `h_l = W_l a_{l−1} + b_l` for every layer.
    pres: Vec<DMatrix<f64>>,
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

impl Mlp {
    /// Build from a dims chain, e.g. `[6, 128, 128, 4]`. The final layer's
    /// init band is multiplied by `final_scale`.
    pub fn new<R: Rng>(dims: &[usize], final_scale: f64, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "MLP needs at least input and output dims, all positive: {dims:?}"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let scale = if i == last { final_scale } else { 1.0 };
                Linear::new(io[0], io[1], scale, rng)
            })
            .collect();
        Ok(Self {
            layers,
            trace: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp forward".into(),
                expected: format!("{} input rows", self.input_dim()),
                actual: format!("{}", x.nrows()),
            });
        }
        ensure_finite_mat(x, "mlp input")
    }

    /// Pure forward pass (no gradient record).
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let h = layer.apply(&a);
            a = if i + 1 < self.layers.len() { relu(&h) } else { h };
        }
        ensure_finite_mat(&a, "mlp output")?;
        Ok(a)
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward_train(&mut self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let h = layer.apply(&a);
            a = if i + 1 < self.layers.len() { relu(&h) } else { h.clone() };
            pres.push(h);
        }
        ensure_finite_mat(&a, "mlp output")?;
        self.trace = Some(Trace {
            input: x.clone(),
            pres,
        });
        Ok(a)
    }

    /// Backpropagate `d_out = ∂L/∂output` through the recorded forward pass,
    /// accumulating parameter gradients, and return `∂L/∂input`.
    pub fn backward(&mut self, d_out: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let trace = self.trace.take().ok_or(Error::BackwardWithoutForward)?;
        ensure_finite_mat(d_out, "upstream gradient")?;
        if d_out.nrows() != self.output_dim() || d_out.ncols() != trace.input.ncols() {
            return Err(Error::DimensionMismatch {
                context: "mlp backward".into(),
                expected: format!("{}×{}", self.output_dim(), trace.input.ncols()),
                actual: format!("{}×{}", d_out.nrows(), d_out.ncols()),
            });
        }

        let mut g = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            let a_prev = if l == 0 {
                trace.input.clone()
            } else {
                relu(&trace.pres[l - 1])
            };
            self.layers[l].gw += &g * a_prev.transpose();
            for col in g.column_iter() {
                self.layers[l].gb += col;
            }
            let mut g_prev = self.layers[l].w.tr_mul(&g);
            if l > 0 {
                // ReLU subgradient: 0 at exactly zero input.
                g_prev.zip_apply(&trace.pres[l - 1], |gv, h| {
                    if h <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            g = g_prev;
        }
        ensure_finite_mat(&g, "input gradient")?;
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.gw.fill(0.0);
            l.gb.fill(0.0);
        }
    }

    /// Apply one Adam step to all parameters from the accumulated gradients.
    pub fn adam_step(&mut self, adam: &mut Adam) -> Result<()> {
        let mut step = adam.begin_step(self.n_params())?;
        for l in &mut self.layers {
            for (p, g) in l.w.iter_mut().zip(l.gw.iter()) {
                step.update(p, *g)?;
            }
            for (p, g) in l.b.iter_mut().zip(l.gb.iter()) {
                step.update(p, *g)?;
            }
        }
        step.finish()
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adaptive moment estimation with bias correction
/// (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Begin an update round covering exactly `n_params` parameters, visited
    /// in a fixed order through [`AdamStep::update`].
    pub fn begin_step(&mut self, n_params: usize) -> Result<AdamStep<'_>> {
        if n_params != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam step".into(),
                expected: format!("{} parameters", self.m.len()),
                actual: format!("{n_params}"),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        Ok(AdamStep {
            adam: self,
            cursor: 0,
            c1,
            c2,
        })
    }
}

/// Cursor over one Adam update round.
pub struct AdamStep<'a> {
    adam: &'a mut Adam,
    cursor: usize,
    c1: f64,
    c2: f64,
}

impl AdamStep<'_> {
    pub fn update(&mut self, param: &mut f64, grad: f64) -> Result<()> {
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient in optimizer step".into()));
        }
        let i = self.cursor;
        self.cursor += 1;
        let a = &mut self.adam;
        a.m[i] = a.beta1 * a.m[i] + (1.0 - a.beta1) * grad;
        a.v[i] = a.beta2 * a.v[i] + (1.0 - a.beta2) * grad * grad;
        let m_hat = a.m[i] / self.c1;
        let v_hat = a.v[i] / self.c2;
        *param -= a.lr * m_hat / (v_hat.sqrt() + a.eps);
        if !param.is_finite() {
            return Err(Error::NonFinite("parameter after optimizer step".into()));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.cursor != self.adam.m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam step".into(),
                expected: format!("{} parameter visits", self.adam.m.len()),
                actual: format!("{}", self.cursor),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Squashed-Gaussian policy head
// ---------------------------------------------------------------------------

/// One sampled squashed-Gaussian action.
#[derive(Debug, Clone)]
pub struct SquashedGaussianSample {
    /// `tanh(μ + σ·ε)`, componentwise in (−1, 1).
    pub action: DVector<f64>,
    /// Joint log-density of the squashed action.
    pub log_prob: f64,
    pub pre_tanh: DVector<f64>,
}

/// A batch of squashed samples plus everything `squash_backward` needs.
#[derive(Debug, Clone)]
pub struct SquashedBatch {
    /// m×B actions in (−1, 1).
    pub actions: DMatrix<f64>,
    /// Per-sample log-densities (length B).
    pub log_probs: DVector<f64>,
    pub pre_tanh: DMatrix<f64>,
    sigma: DMatrix<f64>,
    eps: DMatrix<f64>,
    /// 1 where the raw log-std fell inside the clamp band (gradient passes).
    clamp_gate: DMatrix<f64>,
}

/// Sample squashed-Gaussian actions from a policy-head output.
///
/// `head_out` stacks the mean over the raw log-std (2m × B); `eps` is the
/// m×B standard-normal noise. Per component: `σ = exp(clamp(ls))`,
/// `a = tanh(μ + σε)`, and the joint log-density is
/// `Σᵢ log N(μᵢ + σᵢεᵢ; μᵢ, σᵢ) − Σᵢ ln(1 − aᵢ² + 1e-6)`.
pub fn squash_forward(head_out: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<SquashedBatch> {
    let m2 = head_out.nrows();
    if m2 % 2 != 0 || eps.nrows() != m2 / 2 || eps.ncols() != head_out.ncols() {
        return Err(Error::DimensionMismatch {
            context: "squash_forward".into(),
            expected: "head rows = 2·noise rows, equal columns".into(),
            actual: format!("head {:?}, eps {:?}", head_out.shape(), eps.shape()),
        });
    }
    ensure_finite_mat(head_out, "policy head output")?;
    let m = m2 / 2;
    let b = head_out.ncols();

    let mut actions = DMatrix::zeros(m, b);
    let mut pre_tanh = DMatrix::zeros(m, b);
    let mut sigma = DMatrix::zeros(m, b);
    let mut clamp_gate = DMatrix::zeros(m, b);
    let mut log_probs = DVector::zeros(b);

    for k in 0..b {
        let mut lp = 0.0;
        for i in 0..m {
            let mu = head_out[(i, k)];
            let ls_raw = head_out[(m + i, k)];
            let ls = ls_raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let gate = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&ls_raw) {
                1.0
            } else {
                0.0
            };
            let s = ls.exp();
            let e = eps[(i, k)];
            let pre = mu + s * e;
            let a = pre.tanh();
            lp += -0.5 * LN_2PI - ls - 0.5 * e * e;
            lp -= (1.0 - a * a + TANH_EPS).ln();
            actions[(i, k)] = a;
            pre_tanh[(i, k)] = pre;
            sigma[(i, k)] = s;
            clamp_gate[(i, k)] = gate;
        }
        if !lp.is_finite() {
            return Err(Error::NonFinite("squashed log-probability".into()));
        }
        log_probs[k] = lp;
    }

    Ok(SquashedBatch {
        actions,
        log_probs,
        pre_tanh,
        sigma,
        eps: eps.clone(),
        clamp_gate,
    })
}

/// Backward pass of [`squash_forward`]: given `∂L/∂actions` and
/// `∂L/∂log_probs`, return `∂L/∂head_out` (2m × B).
///
/// With `t = 1 − a²`, the chain rule gives per component
/// `∂L/∂pre = ∂L/∂a · t + ∂L/∂lp · 2at/(t + ε)`, so
/// `∂L/∂μ = ∂L/∂pre` and
/// `∂L/∂ls = (∂L/∂pre)·σε − ∂L/∂lp`, gated to zero where the clamp was
/// active.
pub fn squash_backward(
    fwd: &SquashedBatch,
    d_actions: &DMatrix<f64>,
    d_log_probs: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (m, b) = fwd.actions.shape();
    if d_actions.shape() != (m, b) || d_log_probs.len() != b {
        return Err(Error::DimensionMismatch {
            context: "squash_backward".into(),
            expected: format!("actions {m}×{b}, log-probs length {b}"),
            actual: format!("{:?}, {}", d_actions.shape(), d_log_probs.len()),
        });
    }
    let mut d_head = DMatrix::zeros(2 * m, b);
    for k in 0..b {
        let d_lp = d_log_probs[k];
        for i in 0..m {
            let a = fwd.actions[(i, k)];
            let t = 1.0 - a * a;
            let d_pre = d_actions[(i, k)] * t + d_lp * 2.0 * a * t / (t + TANH_EPS);
            d_head[(i, k)] = d_pre;
            d_head[(m + i, k)] =
                fwd.clamp_gate[(i, k)] * (d_pre * fwd.sigma[(i, k)] * fwd.eps[(i, k)] - d_lp);
        }
    }
    ensure_finite_mat(&d_head, "squash backward gradient")?;
    Ok(d_head)
}

/// Single-sample convenience wrapper over [`squash_forward`].
pub fn sample_squashed_gaussian(
    mean: &DVector<f64>,
    log_std_raw: &DVector<f64>,
    eps: &DVector<f64>,
) -> Result<SquashedGaussianSample> {
    let m = mean.len();
    let mut head = DMatrix::zeros(2 * m, 1);
    head.view_mut((0, 0), (m, 1)).copy_from(mean);
    head.view_mut((m, 0), (m, 1)).copy_from(log_std_raw);
    let eps_m = DMatrix::from_column_slice(m, 1, eps.as_slice());
    let fwd = squash_forward(&head, &eps_m)?;
    Ok(SquashedGaussianSample {
        action: fwd.actions.column(0).into_owned(),
        log_prob: fwd.log_probs[0],
        pre_tanh: fwd.pre_tanh.column(0).into_owned(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint blobs
// ---------------------------------------------------------------------------

/// A named tensor in a checkpoint: shape manifest plus column-major data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorBlob {
    fn from_matrix(name: String, m: &DMatrix<f64>) -> Self {
        Self {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ArtifactMismatch(format!(
                "tensor {}: {} entries for shape {}×{}",
                self.name,
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }
}

impl Mlp {
    /// Serialize parameters as `{prefix}.l{i}.w` / `{prefix}.l{i}.b` blobs.
    pub fn to_blobs(&self, prefix: &str) -> Vec<TensorBlob> {
        let mut blobs = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            blobs.push(TensorBlob::from_matrix(format!("{prefix}.l{i}.w"), &l.w));
            blobs.push(TensorBlob::from_matrix(
                format!("{prefix}.l{i}.b"),
                &DMatrix::from_column_slice(l.b.len(), 1, l.b.as_slice()),
            ));
        }
        blobs
    }

    /// Rebuild a network from blobs produced by [`Mlp::to_blobs`].
    pub fn from_blobs(prefix: &str, blobs: &[TensorBlob]) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let wname = format!("{prefix}.l{i}.w");
            let bname = format!("{prefix}.l{i}.b");
            let w = blobs.iter().find(|t| t.name == wname);
            let b = blobs.iter().find(|t| t.name == bname);
            match (w, b) {
                (Some(w), Some(b)) => {
                    let w = w.to_matrix()?;
                    let b = b.to_matrix()?;
                    if b.ncols() != 1 || b.nrows() != w.nrows() {
                        return Err(Error::ArtifactMismatch(format!(
                            "blob {bname} shape does not match {wname}"
                        )));
                    }
                    let (rows, cols) = w.shape();
                    layers.push(Linear {
                        gw: DMatrix::zeros(rows, cols),
                        gb: DVector::zeros(rows),
                        w,
                        b: DVector::from_column_slice(b.as_slice()),
                    });
                }
                (None, None) => break,
                _ => {
                    return Err(Error::ArtifactMismatch(format!(
                        "checkpoint has only one of {wname}/{bname}"
                    )))
                }
            }
        }
        if layers.is_empty() {
            return Err(Error::ArtifactMismatch(format!(
                "no layers found for prefix {prefix}"
            )));
        }
        for pair in layers.windows(2) {
            if pair[1].w.ncols() != pair[0].w.nrows() {
                return Err(Error::ArtifactMismatch(format!(
                    "layer dims do not chain for prefix {prefix}"
                )));
            }
        }
        Ok(Self {
            layers,
            trace: None,
        })
    }
}

// ---------------------------------------------------------------------------
