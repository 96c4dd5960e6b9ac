//! Clone-structured, 8-connected grid MRF for figure/ground segmentation.
//!
//! Every pixel is a categorical variable with `K = n_clones + 2` states: the
//! clones all mean CONTOUR, then one IN state and one OUT state. Four shared
//! `K x K` log-potential tables cover the up-down, left-right, principal
//! diagonal and secondary diagonal neighbour pairs. Each pixel also emits a
//! noisy binary intensity whose probability depends only on its label type.
//!
//! Inference is parallel log-space BP; every message is log-normalized when
//! it is produced.

use rand::Rng;

use crate::datasets::BorderOwnershipPair;
use crate::error::{invalid, QtError, Result};
use crate::model::{LayerTrace, ModelKind, Parameters};
use crate::numerics::{log_normalize_in_place, logsumexp, tempered_logsumexp};
use crate::tensor::{Matrix, Tensor, TensorTable};

/// Standard deviation of the Gaussian initialization of potential entries.
pub const INIT_POTENTIAL_STD: f64 = 0.1;

/// Emission probabilities are clamped to `[NOISE_FLOOR, 1 - NOISE_FLOOR]` before taking logs.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Segmentation label of a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Out = 0,
    In = 1,
    Contour = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Out, Label::In, Label::Contour];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Out),
            1 => Some(Label::In),
            2 => Some(Label::Contour),
            _ => None,
        }
    }

    pub fn is_foreground(self) -> bool {
        matches!(self, Label::In | Label::Contour)
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Out => "OUT",
            Label::In => "IN",
            Label::Contour => "CONTOUR",
        }
    }
}

/// Probability of emitting intensity 1 for each label type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmissionNoise {
    pub p_contour: f64,
    pub p_in: f64,
    pub p_out: f64,
}

impl EmissionNoise {
    pub fn new(p_contour: f64, p_in: f64, p_out: f64) -> Result<Self> {
        for p in [p_contour, p_in, p_out] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("emission probability {p} outside [0, 1]"));
            }
        }
        Ok(EmissionNoise { p_contour, p_in, p_out })
    }

    pub fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Contour => self.p_contour,
            Label::In => self.p_in,
            Label::Out => self.p_out,
        }
    }
}

/// Maximum-likelihood Bernoulli emission probabilities from labelled images.
pub fn estimate_noise(pairs: &[BorderOwnershipPair]) -> Result<EmissionNoise> {
    let mut lit = [0usize; 3];
    let mut total = [0usize; 3];
    for pair in pairs {
        for (&y, &l) in pair.image.iter().zip(&pair.labels) {
            total[l as usize] += 1;
            lit[l as usize] += y as usize;
        }
    }
    let rate = |l: Label| {
        let k = l as usize;
        if total[k] == 0 {
            Err(QtError::Estimation(l.name()))
        } else {
            Ok(lit[k] as f64 / total[k] as f64)
        }
    };
    EmissionNoise::new(rate(Label::Contour)?, rate(Label::In)?, rate(Label::Out)?)
}

/// Grid MRF parameters. Tables are indexed `[first, second]` where the first
/// variable is the upper (or, for left-right, the left) pixel of the pair;
/// for the secondary diagonal the first pixel is the upper-right one.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrfParams {
    pub pot_ud: Matrix,
    pub pot_lr: Matrix,
    pub pot_d1: Matrix,
    pub pot_d2: Matrix,
    /// Frozen emission channel.
    pub noise: EmissionNoise,
    /// Message-passing temperature; fixed, not trained.
    pub temperature: f64,
}

impl GmrfParams {
    pub fn new(tables: [Matrix; 4], noise: EmissionNoise, temperature: f64) -> Result<Self> {
        let [pot_ud, pot_lr, pot_d1, pot_d2] = tables;
        let p = GmrfParams {
            pot_ud,
            pot_lr,
            pot_d1,
            pot_d2,
            noise,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    /// Gaussian-initialized tables for `n_clones` contour states, `T = 1`.
    pub fn init<R: Rng + ?Sized>(n_clones: usize, noise: EmissionNoise, rng: &mut R) -> Self {
        let k = n_clones + 2;
        let mut table = || Matrix::gaussian(k, k, INIT_POTENTIAL_STD, rng);
        GmrfParams {
            pot_ud: table(),
            pot_lr: table(),
            pot_d1: table(),
            pot_d2: table(),
            noise,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pot_ud.rows();
        if k < 3 {
            return invalid(format!("grid MRF needs at least 3 states, got {k}"));
        }
        for t in self.tables() {
            if t.shape() != (k, k) {
                return invalid("potential tables must all be K x K");
            }
            if !t.is_finite() {
                return invalid("potential tables must be finite");
            }
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return invalid(format!("temperature must be >= 0, got {}", self.temperature));
        }
        EmissionNoise::new(self.noise.p_contour, self.noise.p_in, self.noise.p_out)?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.pot_ud.rows()
    }

    pub fn n_clones(&self) -> usize {
        self.n_states() - 2
    }

    pub fn in_state(&self) -> usize {
        self.n_states() - 2
    }

    pub fn out_state(&self) -> usize {
        self.n_states() - 1
    }

    pub fn label_of_state(&self, s: usize) -> Label {
        if s == self.out_state() {
            Label::Out
        } else if s == self.in_state() {
            Label::In
        } else {
            Label::Contour
        }
    }

    pub fn tables(&self) -> [&Matrix; 4] {
        [&self.pot_ud, &self.pot_lr, &self.pot_d1, &self.pot_d2]
    }

    fn table(&self, kind: usize) -> &Matrix {
        self.tables()[kind]
    }

    fn table_mut(&mut self, kind: usize) -> &mut Matrix {
        match kind {
            0 => &mut self.pot_ud,
            1 => &mut self.pot_lr,
            2 => &mut self.pot_d1,
            _ => &mut self.pot_d2,
        }
    }
}

impl Parameters for GmrfParams {
    const KIND: ModelKind = ModelKind::Gmrf;

    fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::matrix("pot_ud", &self.pot_ud),
            Tensor::matrix("pot_lr", &self.pot_lr),
            Tensor::matrix("pot_d1", &self.pot_d1),
            Tensor::matrix("pot_d2", &self.pot_d2),
            Tensor::vector("noise", &[self.noise.p_contour, self.noise.p_in, self.noise.p_out]),
            Tensor::scalar("temperature", self.temperature),
        ]
    }

    fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut t = TensorTable::new(tensors);
        let tables = [t.matrix("pot_ud")?, t.matrix("pot_lr")?, t.matrix("pot_d1")?, t.matrix("pot_d2")?];
        let noise = t.vector("noise")?;
        if noise.len() != 3 {
            return invalid("noise tensor must hold 3 probabilities");
        }
        let temperature = t.scalar("temperature")?;
        t.finish()?;
        GmrfParams::new(tables, EmissionNoise::new(noise[0], noise[1], noise[2])?, temperature)
    }

    fn zeros_like(&self) -> Self {
        let k = self.n_states();
        GmrfParams {
            pot_ud: Matrix::zeros(k, k),
            pot_lr: Matrix::zeros(k, k),
            pot_d1: Matrix::zeros(k, k),
            pot_d2: Matrix::zeros(k, k),
            noise: self.noise,
            temperature: self.temperature,
        }
    }

    fn trainable(&self) -> Vec<&[f64]> {
        self.tables().iter().map(|t| t.as_slice()).collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.pot_ud.as_mut_slice(),
            self.pot_lr.as_mut_slice(),
            self.pot_d1.as_mut_slice(),
            self.pot_d2.as_mut_slice(),
        ]
    }
}

/// Neighbour offsets `(dr, dc)`. Directions `2k` and `2k + 1` are opposite and
/// share table `k`; for even directions the neighbour is the first variable
/// of the table, for odd ones it is the second.
const DIRECTIONS: [(isize, isize); 8] = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)];

#[inline]
fn opposite(d: usize) -> usize {
    d ^ 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub states: usize,
}

impl GridShape {
    #[inline]
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    fn neighbour(&self, p: usize, d: usize) -> Option<usize> {
        let (dr, dc) = DIRECTIONS[d];
        let r = (p / self.cols) as isize + dr;
        let c = (p % self.cols) as isize + dc;
        if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
            None
        } else {
            Some(r as usize * self.cols + c as usize)
        }
    }

    #[inline]
    fn msg(&self, p: usize, d: usize) -> usize {
        (p * 8 + d) * self.states
    }
}

/// Per-pixel unary log-vectors, `[R x C x K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridUnary {
    pub shape: GridShape,
    pub data: Vec<f64>,
}

impl GridUnary {
    pub fn pixel(&self, p: usize) -> &[f64] {
        let k = self.shape.states;
        &self.data[p * k..(p + 1) * k]
    }
}

/// Incoming log-messages for every pixel and direction. Entries for
/// directions that leave the grid stay zero and are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBeliefState {
    pub shape: GridShape,
    pub data: Vec<f64>,
}

impl GridBeliefState {
    /// Uniform log-normalized messages on every in-grid edge.
    pub fn uniform(shape: GridShape) -> Self {
        let mut data = vec![0.0; shape.pixels() * 8 * shape.states];
        let u = -(shape.states as f64).ln();
        for p in 0..shape.pixels() {
            for d in 0..8 {
                if shape.neighbour(p, d).is_some() {
                    let o = shape.msg(p, d);
                    data[o..o + shape.states].iter_mut().for_each(|x| *x = u);
                }
            }
        }
        GridBeliefState { shape, data }
    }

    /// Message into pixel `p` from its neighbour in direction `d`, if any.
    pub fn incoming(&self, p: usize, d: usize) -> Option<&[f64]> {
        self.shape.neighbour(p, d).map(|_| {
            let o = self.shape.msg(p, d);
            &self.data[o..o + self.shape.states]
        })
    }

    /// Unary plus every incoming message, per pixel.
    fn totals(&self, unary: &GridUnary) -> Vec<f64> {
        let sh = self.shape;
        let k = sh.states;
        let mut tot = unary.data.clone();
        for p in 0..sh.pixels() {
            for d in 0..8 {
                if sh.neighbour(p, d).is_some() {
                    let o = sh.msg(p, d);
                    for s in 0..k {
                        tot[p * k + s] += self.data[o + s];
                    }
                }
            }
        }
        tot
    }
}

/// Log-likelihood of each pixel's intensity under every state.
pub fn gmrf_unary(image: &[u8], rows: usize, cols: usize, params: &GmrfParams) -> Result<GridUnary> {
    if image.len() != rows * cols || rows == 0 || cols == 0 {
        return invalid(format!("image has {} pixels, expected {rows}x{cols}", image.len()));
    }
    let k = params.n_states();
    let log_emit = |p: f64, y: u8| {
        let p = p.clamp(NOISE_FLOOR, 1.0 - NOISE_FLOOR);
        if y == 1 {
            p.ln()
        } else {
            (1.0 - p).ln()
        }
    };
    let mut data = Vec::with_capacity(rows * cols * k);
    for (idx, &y) in image.iter().enumerate() {
        if y > 1 {
            return invalid(format!("pixel {idx} has non-binary value {y}"));
        }
        for s in 0..k {
            data.push(log_emit(params.noise.for_label(params.label_of_state(s)), y));
        }
    }
    Ok(GridUnary {
        shape: GridShape { rows, cols, states: k },
        data,
    })
}

/// Table entry for a message from neighbour state `sn` to target state `sp`
/// arriving from direction `d`.
#[inline]
fn oriented(table: &Matrix, d: usize, sn: usize, sp: usize) -> f64 {
    if d % 2 == 0 {
        table[(sn, sp)]
    } else {
        table[(sp, sn)]
    }
}

fn check_shapes(params: &GmrfParams, unary: &GridUnary, state: &GridBeliefState) -> Result<()> {
    if unary.shape.states != params.n_states() || state.shape != unary.shape {
        return invalid("grid state, unary and parameters disagree on shape");
    }
    if unary.data.len() != unary.shape.pixels() * unary.shape.states {
        return invalid("unary data has the wrong length");
    }
    Ok(())
}

/// One parallel BP update over every directed edge of the grid.
pub fn gmrf_layer(params: &GmrfParams, unary: &GridUnary, state: &GridBeliefState) -> Result<GridBeliefState> {
    params.validate()?;
    check_shapes(params, unary, state)?;
    Ok(layer(params, unary, state))
}

/// Sum-product message kernel over exponentiated, max-shifted tables. Each
/// message then costs K exponentials instead of K^2; columns whose sum
/// under- or overflows fall back to the direct log-space computation.
struct EdgeKernel<'a> {
    params: &'a GmrfParams,
    k: usize,
    t: f64,
    exp_tables: [Vec<f64>; 4],
    shifts: [f64; 4],
}

impl<'a> EdgeKernel<'a> {
    fn new(params: &'a GmrfParams) -> Self {
        let t = params.temperature;
        let tables = params.tables();
        let shifts = tables.map(|m| m.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let exp_tables = [0, 1, 2, 3].map(|i| {
            if t == 0.0 {
                Vec::new()
            } else {
                tables[i].as_slice().iter().map(|x| ((x - shifts[i]) / t).exp()).collect()
            }
        });
        EdgeKernel {
            params,
            k: params.n_states(),
            t,
            exp_tables,
            shifts,
        }
    }

    #[inline]
    fn exp_entry(&self, d: usize, sn: usize, sp: usize) -> f64 {
        let e = &self.exp_tables[d / 2];
        if d % 2 == 0 {
            e[sn * self.k + sp]
        } else {
            e[sp * self.k + sn]
        }
    }

    /// Log-space column `sp` computed directly; used at T = 0 and as a fallback.
    fn direct_column(&self, d: usize, cav: &[f64], sp: usize, col: &mut [f64]) {
        let table = self.params.table(d / 2);
        for sn in 0..self.k {
            col[sn] = oriented(table, d, sn, sp) + cav[sn];
        }
    }

    /// Unnormalized log-message `y` from a neighbour with cavity `cav`.
    fn message(&self, d: usize, cav: &[f64], y: &mut [f64], scratch: &mut [f64]) {
        let k = self.k;
        if self.t > 0.0 {
            let cmax = cav.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for sn in 0..k {
                scratch[sn] = ((cav[sn] - cmax) / self.t).exp();
            }
            let offset = self.shifts[d / 2] + cmax;
            let mut ok = true;
            for sp in 0..k {
                let s: f64 = (0..k).map(|sn| self.exp_entry(d, sn, sp) * scratch[sn]).sum();
                if !(s.is_normal()) {
                    ok = false;
                    break;
                }
                y[sp] = self.t * s.ln() + offset;
            }
            if ok {
                return;
            }
        }
        for sp in 0..k {
            self.direct_column(d, cav, sp, scratch);
            y[sp] = tempered_logsumexp(&scratch[..k], self.t);
        }
    }

    /// Derivative weights `dy[sp] / dcav[sn]`, stored at `w[sp * K + sn]`.
    fn weights(&self, d: usize, cav: &[f64], w: &mut [f64], scratch: &mut [f64]) {
        let k = self.k;
        if self.t > 0.0 {
            let cmax = cav.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for sn in 0..k {
                scratch[sn] = ((cav[sn] - cmax) / self.t).exp();
            }
            let mut ok = true;
            for sp in 0..k {
                let col = &mut w[sp * k..(sp + 1) * k];
                let mut s = 0.0;
                for sn in 0..k {
                    col[sn] = self.exp_entry(d, sn, sp) * scratch[sn];
                    s += col[sn];
                }
                if !(s.is_normal()) {
                    ok = false;
                    break;
                }
                col.iter_mut().for_each(|x| *x /= s);
            }
            if ok {
                return;
            }
        }
        for sp in 0..k {
            let col = &mut w[sp * k..(sp + 1) * k];
            self.direct_column(d, cav, sp, col);
            softmax_in_place(col, self.t);
        }
    }
}

fn layer(params: &GmrfParams, unary: &GridUnary, prev: &GridBeliefState) -> GridBeliefState {
    let sh = unary.shape;
    let k = sh.states;
    let kernel = EdgeKernel::new(params);
    let tot = prev.totals(unary);
    let mut next = GridBeliefState {
        shape: sh,
        data: vec![0.0; prev.data.len()],
    };
    let mut cav = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    for p in 0..sh.pixels() {
        for d in 0..8 {
            let Some(n) = sh.neighbour(p, d) else { continue };
            let back = sh.msg(n, opposite(d));
            for s in 0..k {
                cav[s] = tot[n * k + s] - prev.data[back + s];
            }
            let o = sh.msg(p, d);
            kernel.message(d, &cav, &mut next.data[o..o + k], &mut scratch);
            log_normalize_in_place(&mut next.data[o..o + k]);
        }
    }
    next
}

#[derive(Debug, Clone)]
pub struct GmrfOutput {
    /// Per-pixel state probabilities, `[R x C x K]`.
    pub beliefs: Vec<f64>,
    pub trace: LayerTrace<GridBeliefState, GridUnary>,
}

impl GmrfOutput {
    pub fn shape(&self) -> GridShape {
        self.trace.unary.shape
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        let k = self.shape().states;
        &self.beliefs[p * k..(p + 1) * k]
    }
}

fn beliefs_from(unary: &GridUnary, state: &GridBeliefState) -> Vec<f64> {
    let k = unary.shape.states;
    let mut z = state.totals(unary);
    for px in z.chunks_mut(k) {
        log_normalize_in_place(px);
        px.iter_mut().for_each(|x| *x = x.exp());
    }
    z
}

/// `n_layers` BP updates from uniform messages on a binary image.
pub fn gmrf_forward(params: &GmrfParams, image: &[u8], rows: usize, cols: usize, n_layers: usize) -> Result<GmrfOutput> {
    let unary = gmrf_unary(image, rows, cols, params)?;
    gmrf_forward_unary(params, unary, n_layers)
}

/// Forward pass from explicit unaries.
pub fn gmrf_forward_unary(params: &GmrfParams, unary: GridUnary, n_layers: usize) -> Result<GmrfOutput> {
    if n_layers == 0 {
        return invalid("the network needs at least one layer");
    }
    params.validate()?;
    let mut states = Vec::with_capacity(n_layers + 1);
    states.push(GridBeliefState::uniform(unary.shape));
    check_shapes(params, &unary, &states[0])?;
    for n in 0..n_layers {
        let next = layer(params, &unary, &states[n]);
        states.push(next);
    }
    Ok(GmrfOutput {
        beliefs: beliefs_from(&unary, &states[n_layers]),
        trace: LayerTrace { unary, states },
    })
}

/// Three-class probabilities of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelProbs {
    pub contour: f64,
    pub inside: f64,
    pub outside: f64,
}

impl LabelProbs {
    pub fn get(&self, l: Label) -> f64 {
        match l {
            Label::Contour => self.contour,
            Label::In => self.inside,
            Label::Out => self.outside,
        }
    }

    /// Probabilities indexed by [`Label::code`].
    pub fn by_code(&self) -> [f64; 3] {
        [self.outside, self.inside, self.contour]
    }

    /// Most probable label (ties favour OUT, then IN).
    pub fn argmax(&self) -> Label {
        let mut best = Label::Out;
        for l in [Label::In, Label::Contour] {
            if self.get(l) > self.get(best) {
                best = l;
            }
        }
        best
    }
}

/// Sums clone beliefs into CONTOUR; IN and OUT map one-to-one.
pub fn aggregate_labels(beliefs: &[f64], n_states: usize) -> Result<Vec<LabelProbs>> {
    if n_states < 3 || beliefs.len() % n_states != 0 {
        return invalid("belief length is not a multiple of the state count");
    }
    Ok(beliefs
        .chunks(n_states)
        .map(|b| LabelProbs {
            contour: b[..n_states - 2].iter().sum(),
            inside: b[n_states - 2],
            outside: b[n_states - 1],
        })
        .collect())
}

pub fn predict_labels(out: &GmrfOutput) -> Vec<Label> {
    aggregate_labels(&out.beliefs, out.shape().states)
        .expect("forward output is well formed")
        .iter()
        .map(LabelProbs::argmax)
        .collect()
}

/// Intersection over union of foreground (IN or CONTOUR) pixels; 1 when both are empty.
pub fn iou(pred: &[Label], truth: &[Label]) -> Result<f64> {
    if pred.len() != truth.len() {
        return invalid(format!("label grids differ in size ({} vs {})", pred.len(), truth.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(truth) {
        let (a, b) = (a.is_foreground(), b.is_foreground());
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Accumulates the gradient of the per-pixel label cross-entropy (nats,
/// summed over pixels) into `grad` and returns the loss.
pub fn gmrf_backward(params: &GmrfParams, trace: &LayerTrace<GridBeliefState, GridUnary>, labels: &[Label], grad: &mut GmrfParams) -> Result<f64> {
    let unary = &trace.unary;
    let sh = unary.shape;
    let k = sh.states;
    if labels.len() != sh.pixels() || k != params.n_states() || trace.states.len() < 2 {
        return invalid("labels or trace do not match the model");
    }
    if grad.n_states() != k {
        return invalid("gradient bundle shape does not match the parameters");
    }
    let kernel = EdgeKernel::new(params);
    let mut scratch = vec![0.0; k];
    let mut g_cav = vec![0.0; k];

    // d loss / d(total log-belief) per pixel; the total is unary + incoming.
    let z = trace.last().totals(unary);
    let mut g_tot = vec![0.0; z.len()];
    let mut loss = 0.0;
    for p in 0..sh.pixels() {
        let zp = &z[p * k..(p + 1) * k];
        let in_class: Vec<bool> = (0..k).map(|s| params.label_of_state(s) == labels[p]).collect();
        let class_vals: Vec<f64> = (0..k).filter(|&s| in_class[s]).map(|s| zp[s]).collect();
        let lse_all = logsumexp(zp);
        let lse_class = logsumexp(&class_vals);
        loss += lse_all - lse_class;
        for s in 0..k {
            let mut g = (zp[s] - lse_all).exp();
            if in_class[s] {
                g -= (zp[s] - lse_class).exp();
            }
            g_tot[p * k + s] = g;
        }
    }
    let mut adj = GridBeliefState {
        shape: sh,
        data: vec![0.0; trace.last().data.len()],
    };
    spread_totals(&sh, &g_tot, &mut adj);

    let mut prev_adj = adj.clone();
    let mut cav = vec![0.0; k];
    let mut weights = vec![0.0; k * k];
    let mut g_y = vec![0.0; k];
    let mut g_prev_tot = vec![0.0; z.len()];
    for n in (1..trace.states.len()).rev() {
        let prev = &trace.states[n - 1];
        let next = &trace.states[n];
        let tot = prev.totals(unary);
        prev_adj.data.iter_mut().for_each(|x| *x = 0.0);
        g_prev_tot.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..sh.pixels() {
            for d in 0..8 {
                let Some(nb) = sh.neighbour(p, d) else { continue };
                let o = sh.msg(p, d);
                let g_m = &adj.data[o..o + k];
                if g_m.iter().all(|&g| g == 0.0) {
                    continue;
                }
                // through the normalization: g_y = g_m - softmax(m) * sum(g_m)
                let g_sum: f64 = g_m.iter().sum();
                for s in 0..k {
                    g_y[s] = g_m[s] - next.data[o + s].exp() * g_sum;
                }
                let back = sh.msg(nb, opposite(d));
                for s in 0..k {
                    cav[s] = tot[nb * k + s] - prev.data[back + s];
                }
                kernel.weights(d, &cav, &mut weights, &mut scratch);
                let g_table = grad.table_mut(d / 2).as_mut_slice();
                g_cav.iter_mut().for_each(|x| *x = 0.0);
                for sp in 0..k {
                    let row = &weights[sp * k..(sp + 1) * k];
                    for sn in 0..k {
                        let g = g_y[sp] * row[sn];
                        if d % 2 == 0 {
                            g_table[sn * k + sp] += g;
                        } else {
                            g_table[sp * k + sn] += g;
                        }
                        g_cav[sn] += g;
                    }
                }
                for sn in 0..k {
                    g_prev_tot[nb * k + sn] += g_cav[sn];
                    prev_adj.data[back + sn] -= g_cav[sn];
                }
            }
        }
        spread_totals(&sh, &g_prev_tot, &mut prev_adj);
        std::mem::swap(&mut adj, &mut prev_adj);
    }
    Ok(loss)
}

/// Adds each pixel's total adjoint to every in-grid incoming message of that pixel.
fn spread_totals(sh: &GridShape, g_tot: &[f64], adj: &mut GridBeliefState) {
    let k = sh.states;
    for p in 0..sh.pixels() {
        for d in 0..8 {
            if sh.neighbour(p, d).is_some() {
                let o = sh.msg(p, d);
                for s in 0..k {
                    adj.data[o + s] += g_tot[p * k + s];
                }
            }
        }
    }
}

/// Derivative weights of `T logsumexp(v / T)`; one-hot on the maximum at `T = 0`.
fn softmax_in_place(v: &mut [f64], t: f64) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if t == 0.0 {
        let arg = v.iter().position(|&x| x == m).unwrap_or(0);
        v.iter_mut().enumerate().for_each(|(i, x)| *x = (i == arg) as u8 as f64);
        return;
    }
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = ((*x - m) / t).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Loss (nats) and gradient for one labelled image.
pub fn gmrf_loss_grad(params: &GmrfParams, pair: &BorderOwnershipPair, n_layers: usize) -> Result<(f64, GmrfParams)> {
    let out = gmrf_forward(params, &pair.image, pair.rows, pair.cols, n_layers)?;
    let mut grad = params.zeros_like();
    let loss = gmrf_backward(params, &out.trace, &pair.labels, &mut grad)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_conditional_marginals, EnumerablePgm};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise() -> EmissionNoise {
        EmissionNoise::new(0.8, 0.1, 0.05).unwrap()
    }

    fn random_params(n_clones: usize, scale: f64, rng: &mut ChaCha8Rng) -> GmrfParams {
        let k = n_clones + 2;
        let mut table = || Matrix::from_fn(k, k, |_, _| rng.random_range(-scale..scale));
        GmrfParams::new([table(), table(), table(), table()], noise(), 1.0).unwrap()
    }

    fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        (0..n).map(|_| rng.random_range(0..2)).collect()
    }

    fn enumeration_beliefs(params: &GmrfParams, unary: &GridUnary) -> Vec<Vec<f64>> {
        let pgm = EnumerablePgm::grid(params, unary).unwrap();
        let n = unary.shape.pixels();
        exact_conditional_marginals(&pgm, &vec![None; n], &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn noise_estimation() {
        let labels = vec![Label::Contour; 10];
        let image = vec![1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let mut pairs = vec![BorderOwnershipPair { rows: 1, cols: 10, image, labels }];
        pairs.push(BorderOwnershipPair {
            rows: 1,
            cols: 4,
            image: vec![0, 0, 1, 0],
            labels: vec![Label::In, Label::In, Label::Out, Label::Out],
        });
        let n = estimate_noise(&pairs).unwrap();
        assert_abs_diff_eq!(n.p_contour, 0.7, epsilon = 1e-15);
        assert_eq!(n.p_in, 0.0);
        assert_eq!(n.p_out, 0.5);

        let clean = BorderOwnershipPair {
            rows: 1,
            cols: 3,
            image: vec![1, 0, 0],
            labels: vec![Label::Contour, Label::In, Label::Out],
        };
        assert_eq!(estimate_noise(&[clean]).unwrap(), EmissionNoise::new(1.0, 0.0, 0.0).unwrap());

        let no_in = BorderOwnershipPair {
            rows: 1,
            cols: 2,
            image: vec![1, 0],
            labels: vec![Label::Contour, Label::Out],
        };
        assert!(matches!(estimate_noise(&[no_in]), Err(QtError::Estimation("IN"))));
    }

    #[test]
    fn unary_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(2, 0.1, &mut rng);
        let u = gmrf_unary(&[1, 0], 1, 2, &p).unwrap();
        let lit = u.pixel(0);
        assert_abs_diff_eq!(lit[0], 0.8f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lit[1], 0.8f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lit[2], 0.1f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lit[3], 0.05f64.ln(), epsilon = 1e-12);
        let dark = u.pixel(1);
        assert_abs_diff_eq!(dark[0], 0.2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(dark[2], 0.9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(dark[3], 0.95f64.ln(), epsilon = 1e-12);

        let flat = GmrfParams { noise: EmissionNoise::new(0.5, 0.5, 0.5).unwrap(), ..p };
        let u = gmrf_unary(&[1, 0, 1], 1, 3, &flat).unwrap();
        assert!(u.data.iter().all(|&x| x == u.data[0]));
        assert!(gmrf_unary(&[2], 1, 1, &flat).is_err());
    }

    #[test]
    fn zero_potentials_give_uniform_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(2, 1.0, &mut rng);
        for kind in 0..4 {
            p.table_mut(kind).fill(0.0);
        }
        let img = random_image(12, &mut rng);
        let out = gmrf_forward(&p, &img, 3, 4, 3).unwrap();
        let sh = out.shape();
        let u = -(4f64).ln();
        for s in &out.trace.states {
            for px in 0..sh.pixels() {
                for d in 0..8 {
                    if let Some(m) = s.incoming(px, d) {
                        m.iter().for_each(|&x| assert_abs_diff_eq!(x, u, epsilon = 1e-12));
                    }
                }
            }
        }
        let unary = gmrf_unary(&img, 3, 4, &p).unwrap();
        for px in 0..sh.pixels() {
            let z = logsumexp(unary.pixel(px));
            for s in 0..4 {
                assert_abs_diff_eq!(out.pixel(px)[s], (unary.pixel(px)[s] - z).exp(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_edge_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(1, 2.0, &mut rng);
        let img = [1, 0];
        let out = gmrf_forward(&p, &img, 1, 2, 2).unwrap();
        let exact = enumeration_beliefs(&p, &out.trace.unary);
        for px in 0..2 {
            for s in 0..3 {
                assert_abs_diff_eq!(out.pixel(px)[s], exact[px][s], epsilon = 1e-9);
            }
        }
        // the message into pixel 1 from its left neighbour, by hand
        let unary = &out.trace.unary;
        let m: Vec<f64> = (0..3)
            .map(|s1| (0..3).map(|s0| (p.pot_lr[(s0, s1)] + unary.pixel(0)[s0]).exp()).sum::<f64>())
            .collect();
        let z: f64 = m.iter().sum();
        let got = out.trace.states[1].incoming(1, 2).unwrap();
        for s in 0..3 {
            assert_abs_diff_eq!(got[s], (m[s] / z).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn vertical_and_diagonal_edges_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(1, 1.5, &mut rng);
        for (rows, cols) in [(2, 1), (1, 3)] {
            let img = random_image(rows * cols, &mut rng);
            let out = gmrf_forward(&p, &img, rows, cols, 4).unwrap();
            let exact = enumeration_beliefs(&p, &out.trace.unary);
            for px in 0..rows * cols {
                for s in 0..3 {
                    assert_abs_diff_eq!(out.pixel(px)[s], exact[px][s], epsilon = 1e-9);
                }
            }
        }
        // a 2x2 block has every edge type, and loops, so only rough agreement
        let img = random_image(4, &mut rng);
        let small = random_params(1, 0.3, &mut rng);
        let out = gmrf_forward(&small, &img, 2, 2, 10).unwrap();
        let exact = enumeration_beliefs(&small, &out.trace.unary);
        for px in 0..4 {
            for s in 0..3 {
                assert_abs_diff_eq!(out.pixel(px)[s], exact[px][s], epsilon = 0.05);
            }
        }
    }

    #[test]
    fn strip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cols in [3usize, 5, 8] {
            for n_clones in [1usize, 2] {
                let p = random_params(n_clones, 1.5, &mut rng);
                let img = random_image(cols, &mut rng);
                let out = gmrf_forward(&p, &img, 1, cols, cols).unwrap();
                let exact = enumeration_beliefs(&p, &out.trace.unary);
                for px in 0..cols {
                    for s in 0..n_clones + 2 {
                        assert_abs_diff_eq!(out.pixel(px)[s], exact[px][s], epsilon = 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let uniform = vec![1.0 / 66.0; 66];
        let a = aggregate_labels(&uniform, 66).unwrap()[0];
        assert_abs_diff_eq!(a.contour, 64.0 / 66.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.inside, 1.0 / 66.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.outside, 1.0 / 66.0, epsilon = 1e-15);
        let a = aggregate_labels(&[0.0, 0.0, 1.0, 0.0], 4).unwrap()[0];
        assert_eq!((a.contour, a.inside, a.outside), (0.0, 1.0, 0.0));
        let a = aggregate_labels(&[0.3, 0.3, 0.2, 0.2], 4).unwrap()[0];
        assert_abs_diff_eq!(a.contour, 0.6, epsilon = 1e-15);
        assert_eq!((a.inside, a.outside), (0.2, 0.2));
        assert_eq!(a.argmax(), Label::Contour);
    }

    #[test]
    fn iou_examples() {
        use Label::*;
        let truth = vec![In, Contour, Out, Out];
        assert_eq!(iou(&truth, &truth).unwrap(), 1.0);
        assert_eq!(iou(&[Out, Out, In, In], &truth).unwrap(), 0.0);
        let mut truth = vec![Out; 20];
        let mut pred = vec![Out; 20];
        for k in 0..10 {
            truth[k] = In;
            if k < 5 {
                pred[k] = Contour;
            }
        }
        assert_eq!(iou(&pred, &truth).unwrap(), 0.5);
        assert_eq!(iou(&[Out], &[Out]).unwrap(), 1.0);
        assert!(iou(&[Out], &[Out, In]).is_err());
    }

    #[test]
    fn translation_equivariance_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(2, 1.0, &mut rng);
        let (rows, cols, n) = (12, 12, 3);
        let img = random_image(rows * cols, &mut rng);
        let mut shifted = vec![0u8; rows * cols];
        for r in 0..rows {
            for c in 1..cols {
                shifted[r * cols + c] = img[r * cols + c - 1];
            }
        }
        let a = gmrf_forward(&p, &img, rows, cols, n).unwrap();
        let b = gmrf_forward(&p, &shifted, rows, cols, n).unwrap();
        for r in n + 1..rows - n - 1 {
            for c in n + 1..cols - n - 2 {
                let pa = a.pixel(r * cols + c);
                let pb = b.pixel(r * cols + c + 1);
                for s in 0..4 {
                    assert_abs_diff_eq!(pa[s], pb[s], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn clone_symmetry_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = random_params(3, 1.0, &mut rng);
        // make clone rows and columns identical in every table
        for kind in 0..4 {
            let t = p.table_mut(kind);
            let src = t.clone();
            for a in 0..5 {
                for b in 0..5 {
                    let ca = if a < 3 { 0 } else { a };
                    let cb = if b < 3 { 0 } else { b };
                    t[(a, b)] = src[(ca, cb)];
                }
            }
        }
        let img = random_image(20, &mut rng);
        let out = gmrf_forward(&p, &img, 4, 5, 6).unwrap();
        for px in 0..20 {
            let b = out.pixel(px);
            assert_abs_diff_eq!(b[0], b[1], epsilon = 1e-12);
            assert_abs_diff_eq!(b[0], b[2], epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::oracle::{finite_diff_grad, max_relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(1, 0.5, &mut rng);
        let img = random_image(36, &mut rng);
        let labels: Vec<Label> = (0..36).map(|_| Label::ALL[rng.random_range(0..3)]).collect();
        let pair = BorderOwnershipPair { rows: 6, cols: 6, image: img, labels };
        let (_, g) = gmrf_loss_grad(&p, &pair, 4).unwrap();
        let fd = finite_diff_grad(|pp: &GmrfParams| gmrf_loss_grad(pp, &pair, 4).unwrap().0, &p, 1e-5);
        let err = max_relative_error(&g, &fd);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn fast_kernel_matches_direct_log_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (scale, t) in [(1.0, 1.0), (3.0, 0.5), (900.0, 1.0), (2.0, 0.0)] {
            let mut p = random_params(2, scale, &mut rng);
            p.temperature = t;
            let kernel = EdgeKernel::new(&p);
            let (mut y, mut scratch, mut w) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 16]);
            for d in 0..8 {
                let cav: Vec<f64> = (0..4).map(|_| rng.random_range(-800.0..5.0)).collect();
                kernel.message(d, &cav, &mut y, &mut scratch);
                kernel.weights(d, &cav, &mut w, &mut scratch);
                let table = p.table(d / 2);
                for sp in 0..4 {
                    let col: Vec<f64> = (0..4).map(|sn| oriented(table, d, sn, sp) + cav[sn]).collect();
                    let want = tempered_logsumexp(&col, t);
                    assert_abs_diff_eq!(y[sp], want, epsilon = 1e-9 * (1.0 + want.abs()));
                    let mut soft = col.clone();
                    softmax_in_place(&mut soft, t);
                    for sn in 0..4 {
                        assert_abs_diff_eq!(w[sp * 4 + sn], soft[sn], epsilon = 1e-12);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn beliefs_normalized_and_shift_invariant(seed in any::<u64>(), shift in -5.0f64..5.0, kind in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(2, 2.0, &mut rng);
            let img = random_image(12, &mut rng);
            let a = gmrf_forward(&p, &img, 3, 4, 4).unwrap();
            for px in 0..12 {
                prop_assert!((a.pixel(px).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let mut q = p.clone();
            q.table_mut(kind).as_mut_slice().iter_mut().for_each(|x| *x += shift);
            let b = gmrf_forward(&q, &img, 3, 4, 4).unwrap();
            for (x, y) in a.beliefs.iter().zip(&b.beliefs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
