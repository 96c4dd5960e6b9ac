//! Unrolled parallel belief propagation for binary RBMs and two-layer DBMs.
//!
//! Messages live in logit space. A layer maps the previous message state to
//! the next one using only the previous state (fully parallel schedule); the
//! cavity of an edge is the node total minus the message along that edge.
//!
//! Visible variables are `±1` inside the network. Datasets hold `{0, 1}` and
//! are converted when the unary term is built.

use crate::error::{invalid, Result};
use crate::model::{LayerTrace, ModelKind, Parameters};
use crate::numerics::{binary_transfer_grad, binary_transfer_raw, sigmoid, softplus, LOGIT_CLIP};
use crate::query::QueryMask;
use crate::tensor::{Matrix, Tensor, TensorTable};
use rand::Rng;

/// Lower bound added to the learned temperature so it stays strictly positive.
pub const TEMPERATURE_FLOOR: f64 = 1e-3;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_WEIGHT_STD: f64 = 0.01;

/// `T = softplus(tau) + TEMPERATURE_FLOOR`.
#[inline]
pub fn temperature_from_tau(tau: f64) -> f64 {
    softplus(tau) + TEMPERATURE_FLOOR
}

/// Inverse of [`temperature_from_tau`].
pub fn tau_for_temperature(t: f64) -> Result<f64> {
    let y = t - TEMPERATURE_FLOOR;
    if !(y > 0.0) || !y.is_finite() {
        return invalid(format!("temperature must exceed {TEMPERATURE_FLOOR}, got {t}"));
    }
    // softplus^{-1}(y) = y + log(1 - e^{-y})
    Ok(y + (-(-y).exp_m1()).ln())
}

/// Binary RBM parameters. The energy in `{0,1}` variables is
/// `2 h^T W v + h^T (c_H - W 1) + v^T (c_V - W^T 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    /// Pairwise weights, `[H x V]`.
    pub w: Matrix,
    pub c_v: Vec<f64>,
    pub c_h: Vec<f64>,
    /// Unconstrained temperature parameter, see [`temperature_from_tau`].
    pub tau: f64,
}

impl RbmParams {
    pub fn new(w: Matrix, c_v: Vec<f64>, c_h: Vec<f64>, tau: f64) -> Result<Self> {
        let p = RbmParams { w, c_v, c_h, tau };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters whose derived temperature equals `t`.
    pub fn with_temperature(w: Matrix, c_v: Vec<f64>, c_h: Vec<f64>, t: f64) -> Result<Self> {
        Self::new(w, c_v, c_h, tau_for_temperature(t)?)
    }

    /// Small Gaussian weights, zero biases, `T = 1`.
    pub fn init<R: Rng + ?Sized>(visible: usize, hidden: usize, rng: &mut R) -> Self {
        RbmParams {
            w: Matrix::gaussian(hidden, visible, INIT_WEIGHT_STD, rng),
            c_v: vec![0.0; visible],
            c_h: vec![0.0; hidden],
            tau: tau_for_temperature(1.0).expect("unit temperature is valid"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, v) = self.w.shape();
        if h == 0 || v == 0 {
            return invalid("RBM needs at least one visible and one hidden unit");
        }
        if self.c_v.len() != v || self.c_h.len() != h {
            return invalid(format!(
                "RBM bias lengths ({}, {}) do not match W shape {h}x{v}",
                self.c_v.len(),
                self.c_h.len()
            ));
        }
        if !self.w.is_finite()
            || !self.c_v.iter().chain(&self.c_h).all(|x| x.is_finite())
            || !self.tau.is_finite()
        {
            return invalid("RBM parameters must be finite");
        }
        Ok(())
    }

    #[inline]
    pub fn visible(&self) -> usize {
        self.w.cols()
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.w.rows()
    }

    #[inline]
    pub fn temperature(&self) -> f64 {
        temperature_from_tau(self.tau)
    }
}

impl Parameters for RbmParams {
    const KIND: ModelKind = ModelKind::Rbm;

    fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::matrix("w", &self.w),
            Tensor::vector("c_v", &self.c_v),
            Tensor::vector("c_h", &self.c_h),
            Tensor::scalar("tau", self.tau),
        ]
    }

    fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut t = TensorTable::new(tensors);
        let p = RbmParams::new(t.matrix("w")?, t.vector("c_v")?, t.vector("c_h")?, t.scalar("tau")?)?;
        t.finish()?;
        Ok(p)
    }

    fn zeros_like(&self) -> Self {
        RbmParams {
            w: Matrix::zeros(self.hidden(), self.visible()),
            c_v: vec![0.0; self.visible()],
            c_h: vec![0.0; self.hidden()],
            tau: 0.0,
        }
    }

    fn trainable(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), &self.c_v, &self.c_h, std::slice::from_ref(&self.tau)]
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_mut_slice(),
            &mut self.c_v,
            &mut self.c_h,
            std::slice::from_mut(&mut self.tau),
        ]
    }
}

/// Logit-space messages of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMessages {
    /// Visible-to-hidden messages, `[H x V]`.
    pub hv: Matrix,
    /// Hidden-to-visible messages, `[V x H]`.
    pub vh: Matrix,
}

impl BinaryMessages {
    pub fn zeros(hidden: usize, visible: usize) -> Self {
        BinaryMessages {
            hv: Matrix::zeros(hidden, visible),
            vh: Matrix::zeros(visible, hidden),
        }
    }
}

/// Unary logits from `±1` evidence: `±LOGIT_CLIP` where observed, 0 where queried.
pub fn encode_unary(x: &[f64], q: &QueryMask) -> Result<Vec<f64>> {
    if x.len() != q.len() {
        return invalid(format!("evidence has {} entries, query {}", x.len(), q.len()));
    }
    x.iter()
        .enumerate()
        .map(|(j, &xj)| {
            if xj != 1.0 && xj != -1.0 {
                return invalid(format!("evidence entry {j} must be -1 or +1, got {xj}"));
            }
            Ok(if q.is_evidence(j) { xj * LOGIT_CLIP } else { 0.0 })
        })
        .collect()
}

/// [`encode_unary`] for `{0, 1}` data.
pub fn encode_unary_bits(v: &[u8], q: &QueryMask) -> Result<Vec<f64>> {
    let x = v
        .iter()
        .enumerate()
        .map(|(j, &b)| match b {
            0 => Ok(-1.0),
            1 => Ok(1.0),
            _ => invalid(format!("binary entry {j} must be 0 or 1, got {b}")),
        })
        .collect::<Result<Vec<f64>>>()?;
    encode_unary(&x, q)
}

fn check_state(params: &RbmParams, u_v: &[f64], state: &BinaryMessages) -> Result<()> {
    let (h, v) = params.w.shape();
    if u_v.len() != v || state.hv.shape() != (h, v) || state.vh.shape() != (v, h) {
        return invalid(format!(
            "shape mismatch: W {h}x{v}, unary {}, messages {:?}/{:?}",
            u_v.len(),
            state.hv.shape(),
            state.vh.shape()
        ));
    }
    Ok(())
}

/// One parallel BP update.
pub fn rbm_layer(params: &RbmParams, u_v: &[f64], prev: &BinaryMessages) -> Result<BinaryMessages> {
    params.validate()?;
    check_state(params, u_v, prev)?;
    let mut next = BinaryMessages::zeros(params.hidden(), params.visible());
    layer_into(params, params.temperature(), u_v, prev, &mut next);
    Ok(next)
}

/// Visible totals `u + c_V + sum_k M_VH[j,k]` and hidden totals `c_H + sum_j M_HV[i,j]`.
fn node_totals(params: &RbmParams, u_v: &[f64], state: &BinaryMessages) -> (Vec<f64>, Vec<f64>) {
    let vis = state
        .vh
        .row_sums()
        .into_iter()
        .enumerate()
        .map(|(j, s)| u_v[j] + params.c_v[j] + s)
        .collect();
    let hid = state
        .hv
        .row_sums()
        .into_iter()
        .enumerate()
        .map(|(i, s)| params.c_h[i] + s)
        .collect();
    (vis, hid)
}

fn layer_into(params: &RbmParams, t: f64, u_v: &[f64], prev: &BinaryMessages, next: &mut BinaryMessages) {
    let (vis, hid) = node_totals(params, u_v, prev);
    for i in 0..params.hidden() {
        for j in 0..params.visible() {
            let w = params.w[(i, j)];
            next.hv[(i, j)] = binary_transfer_raw(w, vis[j] - prev.vh[(j, i)], t);
            next.vh[(j, i)] = binary_transfer_raw(w, hid[i] - prev.hv[(i, j)], t);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RbmOutput {
    pub v_hat: Vec<f64>,
    pub h_hat: Vec<f64>,
    pub trace: LayerTrace<BinaryMessages>,
}

/// Runs `n_layers` BP updates from zero messages on `±1` evidence `x`.
pub fn rbm_forward(params: &RbmParams, x: &[f64], q: &QueryMask, n_layers: usize) -> Result<RbmOutput> {
    let u = encode_unary(x, q)?;
    forward_from_unary(params, u, n_layers)
}

/// [`rbm_forward`] on `{0, 1}` data.
pub fn rbm_forward_bits(params: &RbmParams, v: &[u8], q: &QueryMask, n_layers: usize) -> Result<RbmOutput> {
    let u = encode_unary_bits(v, q)?;
    forward_from_unary(params, u, n_layers)
}

/// Forward pass from an explicit unary logit vector.
pub fn forward_from_unary(params: &RbmParams, unary: Vec<f64>, n_layers: usize) -> Result<RbmOutput> {
    if n_layers == 0 {
        return invalid("the network needs at least one layer");
    }
    params.validate()?;
    let (h, v) = params.w.shape();
    let mut states = Vec::with_capacity(n_layers + 1);
    states.push(BinaryMessages::zeros(h, v));
    check_state(params, &unary, &states[0])?;
    let t = params.temperature();
    for n in 0..n_layers {
        let mut next = BinaryMessages::zeros(h, v);
        layer_into(params, t, &unary, &states[n], &mut next);
        states.push(next);
    }
    let (vis, hid) = node_totals(params, &unary, &states[n_layers]);
    Ok(RbmOutput {
        v_hat: vis.into_iter().map(sigmoid).collect(),
        h_hat: hid.into_iter().map(sigmoid).collect(),
        trace: LayerTrace { unary, states },
    })
}

/// Reverse accumulation of the masked cross-entropy (nats) through a trace.
///
/// `targets` lists `(visible index, {0,1} value)` pairs that enter the loss.
/// Gradients are added into `grad`; the loss is returned.
fn backward_targets(params: &RbmParams, trace: &LayerTrace<BinaryMessages>, targets: &[(usize, u8)], grad: &mut RbmParams) -> f64 {
    let (h, v) = params.w.shape();
    let t = params.temperature();
    let u = &trace.unary;
    let (vis, _) = node_totals(params, u, trace.last());

    let mut adj = BinaryMessages::zeros(h, v);
    let mut loss = 0.0;
    for &(j, value) in targets {
        let z = vis[j];
        loss += if value == 1 { softplus(-z) } else { softplus(z) };
        let dz = sigmoid(z) - value as f64;
        grad.c_v[j] += dz;
        adj.vh.row_mut(j).iter_mut().for_each(|a| *a = dz);
    }

    let mut dt = 0.0;
    let mut prev_adj = BinaryMessages::zeros(h, v);
    let mut vis_acc = vec![0.0; v];
    let mut hid_acc = vec![0.0; h];
    for n in (1..trace.states.len()).rev() {
        let prev = &trace.states[n - 1];
        let (vis, hid) = node_totals(params, u, prev);
        prev_adj.hv.fill(0.0);
        prev_adj.vh.fill(0.0);
        vis_acc.iter_mut().for_each(|a| *a = 0.0);
        hid_acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..h {
            for j in 0..v {
                let w = params.w[(i, j)];
                let mut gw = 0.0;

                let a = adj.hv[(i, j)];
                if a != 0.0 {
                    let g = binary_transfer_grad(w, vis[j] - prev.vh[(j, i)], t);
                    gw += a * g.dw;
                    dt += a * g.dt;
                    let gx = a * g.dx;
                    vis_acc[j] += gx;
                    prev_adj.vh[(j, i)] -= gx;
                }

                let a = adj.vh[(j, i)];
                if a != 0.0 {
                    let g = binary_transfer_grad(w, hid[i] - prev.hv[(i, j)], t);
                    gw += a * g.dw;
                    dt += a * g.dt;
                    let gx = a * g.dx;
                    hid_acc[i] += gx;
                    prev_adj.hv[(i, j)] -= gx;
                }

                grad.w[(i, j)] += gw;
            }
        }
        for j in 0..v {
            grad.c_v[j] += vis_acc[j];
            prev_adj.vh.row_mut(j).iter_mut().for_each(|a| *a += vis_acc[j]);
        }
        for i in 0..h {
            grad.c_h[i] += hid_acc[i];
            prev_adj.hv.row_mut(i).iter_mut().for_each(|a| *a += hid_acc[i]);
        }
        std::mem::swap(&mut adj, &mut prev_adj);
    }
    grad.tau += dt * sigmoid(params.tau);
    loss
}

fn check_trace(params: &RbmParams, trace: &LayerTrace<BinaryMessages>) -> Result<()> {
    if trace.states.len() < 2 {
        return invalid("trace holds no layers");
    }
    for s in &trace.states {
        check_state(params, &trace.unary, s)?;
    }
    Ok(())
}

/// Accumulates the gradient of the masked cross-entropy (nats) for one sample
/// into `grad` and returns the loss.
pub fn rbm_backward(params: &RbmParams, trace: &LayerTrace<BinaryMessages>, v: &[u8], q: &QueryMask, grad: &mut RbmParams) -> Result<f64> {
    check_trace(params, trace)?;
    if v.len() != params.visible() || q.len() != params.visible() {
        return invalid("sample/query length does not match the model");
    }
    if grad.w.shape() != params.w.shape() {
        return invalid("gradient bundle shape does not match the parameters");
    }
    let targets: Vec<(usize, u8)> = (0..v.len()).filter(|&j| !q.is_evidence(j)).map(|j| (j, v[j])).collect();
    Ok(backward_targets(params, trace, &targets, grad))
}

/// Loss (nats) and gradient for one `{0,1}` sample.
pub fn rbm_loss_grad(params: &RbmParams, v: &[u8], q: &QueryMask, n_layers: usize) -> Result<(f64, RbmParams)> {
    let out = rbm_forward_bits(params, v, q, n_layers)?;
    let mut grad = params.zeros_like();
    let loss = rbm_backward(params, &out.trace, v, q, &mut grad)?;
    Ok((loss, grad))
}

/// Two-hidden-layer DBM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DbmParams {
    /// `[H1 x V]`
    pub w_h1v: Matrix,
    /// `[H2 x H1]`
    pub w_h2h1: Matrix,
    pub c_v: Vec<f64>,
    pub c_h1: Vec<f64>,
    pub c_h2: Vec<f64>,
    pub tau: f64,
}

impl DbmParams {
    pub fn new(w_h1v: Matrix, w_h2h1: Matrix, c_v: Vec<f64>, c_h1: Vec<f64>, c_h2: Vec<f64>, tau: f64) -> Result<Self> {
        let p = DbmParams { w_h1v, w_h2h1, c_v, c_h1, c_h2, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn init<R: Rng + ?Sized>(visible: usize, h1: usize, h2: usize, rng: &mut R) -> Self {
        DbmParams {
            w_h1v: Matrix::gaussian(h1, visible, INIT_WEIGHT_STD, rng),
            w_h2h1: Matrix::gaussian(h2, h1, INIT_WEIGHT_STD, rng),
            c_v: vec![0.0; visible],
            c_h1: vec![0.0; h1],
            c_h2: vec![0.0; h2],
            tau: tau_for_temperature(1.0).expect("unit temperature is valid"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h1, v) = self.w_h1v.shape();
        let (h2, h1b) = self.w_h2h1.shape();
        if h1 == 0 || v == 0 || h2 == 0 {
            return invalid("DBM layers must be nonempty");
        }
        if h1b != h1 || self.c_v.len() != v || self.c_h1.len() != h1 || self.c_h2.len() != h2 {
            return invalid("inconsistent DBM shapes");
        }
        let finite = self.w_h1v.is_finite()
            && self.w_h2h1.is_finite()
            && self.c_v.iter().chain(&self.c_h1).chain(&self.c_h2).all(|x| x.is_finite())
            && self.tau.is_finite();
        if !finite {
            return invalid("DBM parameters must be finite");
        }
        Ok(())
    }

    pub fn visible(&self) -> usize {
        self.w_h1v.cols()
    }

    pub fn h1(&self) -> usize {
        self.w_h1v.rows()
    }

    pub fn h2(&self) -> usize {
        self.w_h2h1.rows()
    }
}

impl Parameters for DbmParams {
    const KIND: ModelKind = ModelKind::Dbm;

    fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::matrix("w_h1v", &self.w_h1v),
            Tensor::matrix("w_h2h1", &self.w_h2h1),
            Tensor::vector("c_v", &self.c_v),
            Tensor::vector("c_h1", &self.c_h1),
            Tensor::vector("c_h2", &self.c_h2),
            Tensor::scalar("tau", self.tau),
        ]
    }

    fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut t = TensorTable::new(tensors);
        let p = DbmParams::new(
            t.matrix("w_h1v")?,
            t.matrix("w_h2h1")?,
            t.vector("c_v")?,
            t.vector("c_h1")?,
            t.vector("c_h2")?,
            t.scalar("tau")?,
        )?;
        t.finish()?;
        Ok(p)
    }

    fn zeros_like(&self) -> Self {
        DbmParams {
            w_h1v: Matrix::zeros(self.h1(), self.visible()),
            w_h2h1: Matrix::zeros(self.h2(), self.h1()),
            c_v: vec![0.0; self.visible()],
            c_h1: vec![0.0; self.h1()],
            c_h2: vec![0.0; self.h2()],
            tau: 0.0,
        }
    }

    fn trainable(&self) -> Vec<&[f64]> {
        vec![
            self.w_h1v.as_slice(),
            self.w_h2h1.as_slice(),
            &self.c_v,
            &self.c_h1,
            &self.c_h2,
            std::slice::from_ref(&self.tau),
        ]
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_h1v.as_mut_slice(),
            self.w_h2h1.as_mut_slice(),
            &mut self.c_v,
            &mut self.c_h1,
            &mut self.c_h2,
            std::slice::from_mut(&mut self.tau),
        ]
    }
}

/// A DBM rewritten as an RBM whose visible layer is `[v ; h2]` and whose
/// hidden layer is `h1`.
#[derive(Debug, Clone)]
pub struct DbmView {
    pub rbm: RbmParams,
    pub n_visible: usize,
    pub n_h2: usize,
}

/// Stacks `W~ = [W_H1V | W_H2H1^T]` (`[H1 x (V+H2)]`), `c~_V = [c_V ; c_H2]`, `c~_H = c_H1`.
pub fn dbm_to_rbm(params: &DbmParams) -> Result<DbmView> {
    params.validate()?;
    let (v, h1, h2) = (params.visible(), params.h1(), params.h2());
    let w = Matrix::from_fn(h1, v + h2, |i, j| {
        if j < v {
            params.w_h1v[(i, j)]
        } else {
            params.w_h2h1[(j - v, i)]
        }
    });
    let c_v = params.c_v.iter().chain(&params.c_h2).copied().collect();
    Ok(DbmView {
        rbm: RbmParams {
            w,
            c_v,
            c_h: params.c_h1.clone(),
            tau: params.tau,
        },
        n_visible: v,
        n_h2: h2,
    })
}

impl DbmView {
    /// Extends visible unary logits with `logit(0.5) = 0` for every `h2` unit.
    pub fn extend_unary(&self, u_v: &[f64]) -> Vec<f64> {
        let mut u = u_v.to_vec();
        u.resize(self.n_visible + self.n_h2, 0.0);
        u
    }

    /// `q~ = [q ; 1]`.
    pub fn extend_query(&self, q: &QueryMask) -> QueryMask {
        q.extended(self.n_h2, true)
    }

    /// Maps a gradient on the stacked RBM back onto the DBM parameters.
    pub fn fold_gradient(&self, g: &RbmParams) -> DbmParams {
        let (v, h2) = (self.n_visible, self.n_h2);
        let h1 = g.hidden();
        DbmParams {
            w_h1v: Matrix::from_fn(h1, v, |i, j| g.w[(i, j)]),
            w_h2h1: Matrix::from_fn(h2, h1, |k, i| g.w[(i, v + k)]),
            c_v: g.c_v[..v].to_vec(),
            c_h1: g.c_h.clone(),
            c_h2: g.c_v[v..].to_vec(),
            tau: g.tau,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DbmOutput {
    pub v_hat: Vec<f64>,
    pub h1_hat: Vec<f64>,
    pub h2_hat: Vec<f64>,
    pub trace: LayerTrace<BinaryMessages>,
}

pub fn dbm_forward(params: &DbmParams, x: &[f64], q: &QueryMask, n_layers: usize) -> Result<DbmOutput> {
    let view = dbm_to_rbm(params)?;
    let u = view.extend_unary(&encode_unary(x, q)?);
    let out = forward_from_unary(&view.rbm, u, n_layers)?;
    let v = view.n_visible;
    Ok(DbmOutput {
        h2_hat: out.v_hat[v..].to_vec(),
        v_hat: out.v_hat[..v].to_vec(),
        h1_hat: out.h_hat,
        trace: out.trace,
    })
}

pub fn dbm_forward_bits(params: &DbmParams, v: &[u8], q: &QueryMask, n_layers: usize) -> Result<DbmOutput> {
    let x: Vec<f64> = v.iter().map(|&b| 2.0 * b as f64 - 1.0).collect();
    if v.iter().any(|&b| b > 1) {
        return invalid("binary data must be 0 or 1");
    }
    dbm_forward(params, &x, q, n_layers)
}

/// Accumulates the DBM gradient for one sample; the trace must come from
/// [`dbm_forward`] on the same parameters.
pub fn dbm_backward(params: &DbmParams, trace: &LayerTrace<BinaryMessages>, v: &[u8], q: &QueryMask, grad: &mut DbmParams) -> Result<f64> {
    let view = dbm_to_rbm(params)?;
    check_trace(&view.rbm, trace)?;
    if v.len() != view.n_visible || q.len() != view.n_visible {
        return invalid("sample/query length does not match the model");
    }
    let targets: Vec<(usize, u8)> = (0..v.len()).filter(|&j| !q.is_evidence(j)).map(|j| (j, v[j])).collect();
    let mut g = view.rbm.zeros_like();
    let loss = backward_targets(&view.rbm, trace, &targets, &mut g);
    grad.add_scaled(&view.fold_gradient(&g), 1.0);
    Ok(loss)
}

pub fn dbm_loss_grad(params: &DbmParams, v: &[u8], q: &QueryMask, n_layers: usize) -> Result<(f64, DbmParams)> {
    let out = dbm_forward_bits(params, v, q, n_layers)?;
    let mut grad = params.zeros_like();
    let loss = dbm_backward(params, &out.trace, v, q, &mut grad)?;
    Ok((loss, grad))
}
