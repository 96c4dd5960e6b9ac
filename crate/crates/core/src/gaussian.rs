//! Unrolled BP for the Gaussian RBM: binary hidden units, continuous visible
//! units with `sigma = 1`.
//!
//! Visible-to-hidden messages are logits. Hidden-to-visible messages are
//! Gaussians stored as natural parameters `(theta1, theta2)` with
//! `theta1 = mu / s2` and `theta2 = -1 / (2 s2)`; each one is the moment-matched
//! belief divided by the visible cavity.

use rand::Rng;

use crate::binary::INIT_WEIGHT_STD;
use crate::error::{invalid, QtError, Result};
use crate::model::{LayerTrace, ModelKind, Parameters};
use crate::numerics::sigmoid;
use crate::query::QueryMask;
use crate::tensor::{Matrix, Tensor, TensorTable};

/// Default variance of the evidence factor on observed visible units.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Gaussian RBM with `phi(v, h) = -|v - b|^2 / 2 + c^T h + h^T W v`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrbmParams {
    /// `[H x V]`
    pub w: Matrix,
    /// Visible means.
    pub b: Vec<f64>,
    /// Hidden biases.
    pub c: Vec<f64>,
}

impl GrbmParams {
    /// Fixed visible standard deviation.
    pub const SIGMA: f64 = 1.0;

    pub fn new(w: Matrix, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let p = GrbmParams { w, b, c };
        p.validate()?;
        Ok(p)
    }

    /// Small Gaussian weights, zero hidden biases and visible means `b`.
    pub fn init<R: Rng + ?Sized>(hidden: usize, b: Vec<f64>, rng: &mut R) -> Self {
        GrbmParams {
            w: Matrix::gaussian(hidden, b.len(), INIT_WEIGHT_STD, rng),
            b,
            c: vec![0.0; hidden],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, v) = self.w.shape();
        if h == 0 || v == 0 || self.b.len() != v || self.c.len() != h {
            return invalid("inconsistent GRBM shapes");
        }
        if !self.w.is_finite() || !self.b.iter().chain(&self.c).all(|x| x.is_finite()) {
            return invalid("GRBM parameters must be finite");
        }
        Ok(())
    }

    pub fn visible(&self) -> usize {
        self.w.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w.rows()
    }
}

impl Parameters for GrbmParams {
    const KIND: ModelKind = ModelKind::Grbm;

    fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::matrix("w", &self.w),
            Tensor::vector("b", &self.b),
            Tensor::vector("c", &self.c),
        ]
    }

    fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut t = TensorTable::new(tensors);
        let p = GrbmParams::new(t.matrix("w")?, t.vector("b")?, t.vector("c")?)?;
        t.finish()?;
        Ok(p)
    }

    fn zeros_like(&self) -> Self {
        GrbmParams {
            w: Matrix::zeros(self.hidden(), self.visible()),
            b: vec![0.0; self.visible()],
            c: vec![0.0; self.hidden()],
        }
    }

    fn trainable(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), &self.b, &self.c]
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), &mut self.b, &mut self.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrbmConfig {
    /// Variance of the evidence factor on observed units.
    pub epsilon: f64,
    pub n_layers: usize,
}

impl GrbmConfig {
    pub fn new(epsilon: f64, n_layers: usize) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return invalid(format!("epsilon must be positive, got {epsilon}"));
        }
        if n_layers == 0 {
            return invalid("the network needs at least one layer");
        }
        Ok(GrbmConfig { epsilon, n_layers })
    }
}

/// Messages of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMessages {
    /// Visible-to-hidden logits, `[H x V]`.
    pub hv: Matrix,
    /// First natural parameter of hidden-to-visible messages, `[V x H]`.
    pub vh1: Matrix,
    /// Second natural parameter of hidden-to-visible messages, `[V x H]`.
    pub vh2: Matrix,
}

impl GaussianMessages {
    /// The initial state: zero logits, unit-variance flat Gaussians.
    pub fn initial(hidden: usize, visible: usize) -> Self {
        GaussianMessages {
            hv: Matrix::zeros(hidden, visible),
            vh1: Matrix::zeros(visible, hidden),
            vh2: Matrix::filled(visible, hidden, -0.5),
        }
    }
}

/// Visible unary factors in natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianUnary {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
}

/// Unary terms with the first entry as a mean: `v` where observed and `b`
/// where queried; the second is `-1/(2 eps)` where observed and `-1/2` where queried.
pub fn grbm_encode_unary(v: &[f64], q: &QueryMask, b: &[f64], epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != q.len() || v.len() != b.len() {
        return invalid("grbm_encode_unary: length mismatch");
    }
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    if let Some(j) = v.iter().position(|x| !x.is_finite()) {
        return invalid(format!("visible value {j} is not finite"));
    }
    let t1 = (0..v.len()).map(|j| if q.is_evidence(j) { v[j] } else { b[j] }).collect();
    let t2 = (0..v.len())
        .map(|j| if q.is_evidence(j) { -0.5 / epsilon } else { -0.5 })
        .collect();
    Ok((t1, t2))
}

/// [`grbm_encode_unary`] converted to natural parameters (`theta1 = mean * (-2 theta2)`).
pub fn natural_unary(v: &[f64], q: &QueryMask, b: &[f64], epsilon: f64) -> Result<GaussianUnary> {
    let (mean, t2) = grbm_encode_unary(v, q, b, epsilon)?;
    let t1 = mean.iter().zip(&t2).map(|(m, t)| m * (-2.0 * t)).collect();
    Ok(GaussianUnary { t1, t2 })
}

fn improper(what: &str, t2: f64) -> QtError {
    QtError::NumericalDomain(format!("{what}: second natural parameter {t2} is not negative"))
}

/// Logit message from a visible unit with cavity `(t1, t2)` across weight `w`:
/// `-(2 t1 w + w^2) / (4 t2)`.
pub fn visible_to_hidden_message(w: f64, t1: f64, t2: f64) -> Result<f64> {
    if !(t2 < 0.0) {
        return Err(improper("visible cavity", t2));
    }
    Ok(-(2.0 * t1 * w + w * w) / (4.0 * t2))
}

/// Partial derivatives `(d/dw, d/dt1, d/dt2)` of [`visible_to_hidden_message`].
#[inline]
fn visible_to_hidden_partials(w: f64, t1: f64, t2: f64) -> (f64, f64, f64) {
    (
        -(t1 + w) / (2.0 * t2),
        -w / (2.0 * t2),
        (2.0 * t1 * w + w * w) / (4.0 * t2 * t2),
    )
}

/// Intermediate quantities of the moment-matched belief, kept for the reverse pass.
#[derive(Debug, Clone, Copy)]
struct BeliefParts {
    mu: f64,
    s2: f64,
    r: f64,
    mean: f64,
    var: f64,
}

fn belief_parts(w: f64, x: f64, t1: f64, t2: f64) -> Result<BeliefParts> {
    if !(t2 < 0.0) {
        return Err(improper("visible cavity", t2));
    }
    let s2 = -0.5 / t2;
    let mu = t1 * s2;
    let r = sigmoid(x + w * mu + 0.5 * s2 * w * w);
    // mixture of N(mu, s2) and N(mu + s2 w, s2) with weights (1 - r, r)
    let mean = mu + r * s2 * w;
    let var = s2 + r * (1.0 - r) * s2 * s2 * w * w;
    if !(var > 0.0) || !var.is_finite() {
        return Err(QtError::NumericalDomain(format!("belief variance {var} is not positive")));
    }
    Ok(BeliefParts { mu, s2, r, mean, var })
}

/// Natural parameters of the Gaussian matching the first two moments of the
/// visible belief: the cavity `(t1, t2)` times the factor to a hidden unit
/// whose own cavity logit is `x`.
pub fn gaussian_belief_approx(w: f64, x: f64, t1: f64, t2: f64) -> Result<(f64, f64)> {
    let p = belief_parts(w, x, t1, t2)?;
    Ok((p.mean / p.var, -0.5 / p.var))
}

/// The moment-matched belief divided by the cavity.
pub fn hidden_to_visible_message(w: f64, x: f64, t1: f64, t2: f64) -> Result<(f64, f64)> {
    let (b1, b2) = gaussian_belief_approx(w, x, t1, t2)?;
    Ok((b1 - t1, b2 - t2))
}

/// Vector-Jacobian product of [`hidden_to_visible_message`]: given adjoints of
/// the two message parameters, returns adjoints of `(w, x, t1, t2)`.
fn hidden_to_visible_vjp(w: f64, x: f64, t1: f64, t2: f64, g1: f64, g2: f64) -> Result<[f64; 4]> {
    let BeliefParts { mu, s2, r, mean, var } = belief_parts(w, x, t1, t2)?;
    let rr = r * (1.0 - r);
    let g_mean = g1 / var;
    let g_var = -g1 * mean / (var * var) + g2 / (2.0 * var * var);
    let g_a = g_mean * s2 * w * rr + g_var * (1.0 - 2.0 * r) * rr * s2 * s2 * w * w;
    let g_mu = g_mean + g_a * w;
    let g_s2 = g_mean * r * w + g_var * (1.0 + 2.0 * rr * s2 * w * w) + g_a * 0.5 * w * w;
    let g_w = g_mean * r * s2 + g_var * 2.0 * rr * s2 * s2 * w + g_a * (mu + s2 * w);
    // mu = -t1 / (2 t2), s2 = -1 / (2 t2)
    let g_t1 = g_mu * s2 - g1;
    let g_t2 = (g_mu * t1 + g_s2) / (2.0 * t2 * t2) - g2;
    Ok([g_w, g_a, g_t1, g_t2])
}

#[derive(Debug, Clone)]
pub struct GrbmOutput {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub h_hat: Vec<f64>,
    pub trace: LayerTrace<GaussianMessages, GaussianUnary>,
}

/// Visible cavities `(C1, C2)` as `[V x H]` and hidden cavities `X` as `[H x V]`.
struct Cavities {
    c1: Matrix,
    c2: Matrix,
    x: Matrix,
}

fn cavities(params: &GrbmParams, unary: &GaussianUnary, s: &GaussianMessages) -> Cavities {
    let (h, v) = params.w.shape();
    let s1 = s.vh1.row_sums();
    let s2 = s.vh2.row_sums();
    let sh = s.hv.row_sums();
    Cavities {
        c1: Matrix::from_fn(v, h, |j, i| unary.t1[j] + s1[j] - s.vh1[(j, i)]),
        c2: Matrix::from_fn(v, h, |j, i| unary.t2[j] + s2[j] - s.vh2[(j, i)]),
        x: Matrix::from_fn(h, v, |i, j| params.c[i] + sh[i] - s.hv[(i, j)]),
    }
}

fn layer(params: &GrbmParams, unary: &GaussianUnary, prev: &GaussianMessages) -> Result<GaussianMessages> {
    let (h, v) = params.w.shape();
    let cav = cavities(params, unary, prev);
    let mut next = GaussianMessages::initial(h, v);
    for i in 0..h {
        for j in 0..v {
            let w = params.w[(i, j)];
            let (t1, t2) = (cav.c1[(j, i)], cav.c2[(j, i)]);
            next.hv[(i, j)] = visible_to_hidden_message(w, t1, t2)
                .map_err(|e| locate(e, "visible", j))?;
            let (m1, m2) = hidden_to_visible_message(w, cav.x[(i, j)], t1, t2)
                .map_err(|e| locate(e, "visible", j))?;
            next.vh1[(j, i)] = m1;
            next.vh2[(j, i)] = m2;
        }
    }
    Ok(next)
}

fn locate(e: QtError, kind: &str, unit: usize) -> QtError {
    match e {
        QtError::NumericalDomain(msg) => QtError::NumericalDomain(format!("{kind} unit {unit}: {msg}")),
        other => other,
    }
}

/// Posterior natural parameters at every visible unit.
fn readout(unary: &GaussianUnary, s: &GaussianMessages) -> (Vec<f64>, Vec<f64>) {
    let t1 = s.vh1.row_sums().iter().zip(&unary.t1).map(|(m, u)| u + m).collect();
    let t2 = s.vh2.row_sums().iter().zip(&unary.t2).map(|(m, u)| u + m).collect();
    (t1, t2)
}

pub fn grbm_forward(params: &GrbmParams, v: &[f64], q: &QueryMask, cfg: &GrbmConfig) -> Result<GrbmOutput> {
    params.validate()?;
    let cfg = GrbmConfig::new(cfg.epsilon, cfg.n_layers)?;
    if v.len() != params.visible() {
        return invalid(format!("sample has {} values, model {}", v.len(), params.visible()));
    }
    let unary = natural_unary(v, q, &params.b, cfg.epsilon)?;
    let (h, nv) = params.w.shape();
    let mut states = Vec::with_capacity(cfg.n_layers + 1);
    states.push(GaussianMessages::initial(h, nv));
    for n in 0..cfg.n_layers {
        let next = layer(params, &unary, &states[n])?;
        states.push(next);
    }
    let last = &states[cfg.n_layers];
    let (t1, t2) = readout(&unary, last);
    if let Some(j) = t2.iter().position(|&t| !(t < 0.0)) {
        return Err(QtError::NumericalDomain(format!(
            "visible unit {j}: posterior second natural parameter {} is not negative",
            t2[j]
        )));
    }
    let mean = t1.iter().zip(&t2).map(|(a, b)| -a / (2.0 * b)).collect();
    let var = t2.iter().map(|b| -0.5 / b).collect();
    let h_hat = last
        .hv
        .row_sums()
        .iter()
        .zip(&params.c)
        .map(|(m, c)| sigmoid(c + m))
        .collect();
    Ok(GrbmOutput {
        mean,
        var,
        h_hat,
        trace: LayerTrace { unary, states },
    })
}

/// Accumulates the gradient of the Gaussian negative log-likelihood (nats) of
/// the targets into `grad` and returns the loss.
pub fn grbm_backward(
    params: &GrbmParams,
    trace: &LayerTrace<GaussianMessages, GaussianUnary>,
    v: &[f64],
    q: &QueryMask,
    grad: &mut GrbmParams,
) -> Result<f64> {
    let (h, nv) = params.w.shape();
    if v.len() != nv || q.len() != nv || trace.unary.t1.len() != nv || trace.states.len() < 2 {
        return invalid("trace, sample or query does not match the model");
    }
    if grad.w.shape() != params.w.shape() {
        return invalid("gradient bundle shape does not match the parameters");
    }
    let unary = &trace.unary;
    let (t1, t2) = readout(unary, trace.last());

    let mut adj = GaussianMessages::initial(h, nv);
    adj.vh2.fill(0.0);
    let mut loss = 0.0;
    for j in (0..nv).filter(|&j| !q.is_evidence(j)) {
        let (a, b) = (t1[j], t2[j]);
        if !(b < 0.0) {
            return Err(improper("posterior", b));
        }
        let mean = -a / (2.0 * b);
        let var = -0.5 / b;
        loss += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + (v[j] - mean).powi(2) / (2.0 * var);
        let g1 = mean - v[j];
        let g2 = mean * mean + var - v[j] * v[j];
        grad.b[j] += g1;
        adj.vh1.row_mut(j).iter_mut().for_each(|x| *x = g1);
        adj.vh2.row_mut(j).iter_mut().for_each(|x| *x = g2);
    }

    let mut prev_adj = adj.clone();
    for n in (1..trace.states.len()).rev() {
        let prev = &trace.states[n - 1];
        let cav = cavities(params, unary, prev);
        prev_adj.hv.fill(0.0);
        prev_adj.vh1.fill(0.0);
        prev_adj.vh2.fill(0.0);
        let mut acc1 = vec![0.0; nv];
        let mut acc2 = vec![0.0; nv];
        let mut acc_h = vec![0.0; h];
        for i in 0..h {
            for j in 0..nv {
                let w = params.w[(i, j)];
                let (c1, c2) = (cav.c1[(j, i)], cav.c2[(j, i)]);
                let (mut g_c1, mut g_c2, mut g_w) = (0.0, 0.0, 0.0);

                let a = adj.hv[(i, j)];
                if a != 0.0 {
                    if !(c2 < 0.0) {
                        return Err(improper("visible cavity", c2));
                    }
                    let (dw, d1, d2) = visible_to_hidden_partials(w, c1, c2);
                    g_w += a * dw;
                    g_c1 += a * d1;
                    g_c2 += a * d2;
                }

                let (a1, a2) = (adj.vh1[(j, i)], adj.vh2[(j, i)]);
                if a1 != 0.0 || a2 != 0.0 {
                    let [dw, dx, d1, d2] = hidden_to_visible_vjp(w, cav.x[(i, j)], c1, c2, a1, a2)?;
                    g_w += dw;
                    g_c1 += d1;
                    g_c2 += d2;
                    acc_h[i] += dx;
                    prev_adj.hv[(i, j)] -= dx;
                }

                grad.w[(i, j)] += g_w;
                acc1[j] += g_c1;
                acc2[j] += g_c2;
                prev_adj.vh1[(j, i)] -= g_c1;
                prev_adj.vh2[(j, i)] -= g_c2;
            }
        }
        for j in 0..nv {
            if !q.is_evidence(j) {
                grad.b[j] += acc1[j];
            }
            prev_adj.vh1.row_mut(j).iter_mut().for_each(|x| *x += acc1[j]);
            prev_adj.vh2.row_mut(j).iter_mut().for_each(|x| *x += acc2[j]);
        }
        for i in 0..h {
            grad.c[i] += acc_h[i];
            prev_adj.hv.row_mut(i).iter_mut().for_each(|x| *x += acc_h[i]);
        }
        std::mem::swap(&mut adj, &mut prev_adj);
    }
    Ok(loss)
}

/// Loss (nats) and gradient for one sample.
pub fn grbm_loss_grad(params: &GrbmParams, v: &[f64], q: &QueryMask, cfg: &GrbmConfig) -> Result<(f64, GrbmParams)> {
    let out = grbm_forward(params, v, q, cfg)?;
    let mut grad = params.zeros_like();
    let loss = grbm_backward(params, &out.trace, v, q, &mut grad)?;
    Ok((loss, grad))
}
