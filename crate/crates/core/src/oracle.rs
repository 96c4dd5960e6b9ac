//! Ground truth by brute force: exact conditional marginals and exact samples
//! by enumerating every joint assignment, and central finite differences.
//!
//! Nothing here shares code with the message-passing layers beyond the model
//! parameter types, so agreement between the two is meaningful.

use rand::Rng;

use crate::binary::{DbmParams, RbmParams};
use crate::error::{invalid, QtError, Result};
use crate::grid::{GmrfParams, GridUnary};
use crate::model::Parameters;

/// Largest joint state space the oracle will enumerate.
pub const MAX_JOINT_STATES: u128 = 1 << 20;

type LogPotential<'a> = Box<dyn Fn(&[usize]) -> f64 + Send + Sync + 'a>;

/// A model small enough to enumerate: variable cardinalities plus an
/// unnormalized log-density over full assignments.
pub struct EnumerablePgm<'a> {
    cards: Vec<usize>,
    log_potential: LogPotential<'a>,
}

impl<'a> EnumerablePgm<'a> {
    pub fn new(cards: Vec<usize>, log_potential: impl Fn(&[usize]) -> f64 + Send + Sync + 'a) -> Result<Self> {
        if cards.iter().any(|&c| c == 0) {
            return invalid("variable with zero states");
        }
        let states = cards.iter().try_fold(1u128, |acc, &c| acc.checked_mul(c as u128));
        match states {
            Some(s) if s <= MAX_JOINT_STATES => Ok(EnumerablePgm {
                cards,
                log_potential: Box::new(log_potential),
            }),
            _ => Err(QtError::Capacity {
                states: states.unwrap_or(u128::MAX),
                bound: MAX_JOINT_STATES,
            }),
        }
    }

    /// Variables `0..V` are visible, `V..V+H` hidden, all `{0, 1}`.
    pub fn rbm(params: &'a RbmParams) -> Result<Self> {
        let (h, v) = params.w.shape();
        EnumerablePgm::new(vec![2; v + h], move |x| {
            let (vis, hid) = x.split_at(v);
            let mut e = 0.0;
            for i in 0..h {
                let hi = hid[i] as f64;
                let mut row = 0.0;
                for j in 0..v {
                    let w = params.w[(i, j)];
                    row += w * (2.0 * hi * vis[j] as f64 - hi - vis[j] as f64);
                }
                e += row + params.c_h[i] * hi;
            }
            e + (0..v).map(|j| params.c_v[j] * vis[j] as f64).sum::<f64>()
        })
    }

    /// Variables `0..V` visible, then `H1`, then `H2`.
    pub fn dbm(params: &'a DbmParams) -> Result<Self> {
        let (v, h1, h2) = (params.visible(), params.h1(), params.h2());
        EnumerablePgm::new(vec![2; v + h1 + h2], move |x| {
            let (vis, rest) = x.split_at(v);
            let (a, b) = rest.split_at(h1);
            let pair = |w: f64, p: usize, q: usize| w * (2.0 * (p * q) as f64 - p as f64 - q as f64);
            let mut e = 0.0;
            for i in 0..h1 {
                for j in 0..v {
                    e += pair(params.w_h1v[(i, j)], a[i], vis[j]);
                }
                for k in 0..h2 {
                    e += pair(params.w_h2h1[(k, i)], b[k], a[i]);
                }
                e += params.c_h1[i] * a[i] as f64;
            }
            e += (0..v).map(|j| params.c_v[j] * vis[j] as f64).sum::<f64>();
            e + (0..h2).map(|k| params.c_h2[k] * b[k] as f64).sum::<f64>()
        })
    }

    /// One categorical variable per pixel (row-major) and one term per
    /// unordered 8-neighbour pair.
    pub fn grid(params: &'a GmrfParams, unary: &'a GridUnary) -> Result<Self> {
        let sh = unary.shape;
        if sh.states != params.n_states() {
            return invalid("unary state count does not match the parameters");
        }
        EnumerablePgm::new(vec![sh.states; sh.pixels()], move |x| {
            let mut e = 0.0;
            for p in 0..sh.pixels() {
                e += unary.pixel(p)[x[p]];
                let (r, c) = (p / sh.cols, p % sh.cols);
                if r + 1 < sh.rows {
                    e += params.pot_ud[(x[p], x[p + sh.cols])];
                }
                if c + 1 < sh.cols {
                    e += params.pot_lr[(x[p], x[p + 1])];
                }
                if r + 1 < sh.rows && c + 1 < sh.cols {
                    e += params.pot_d1[(x[p], x[p + sh.cols + 1])];
                }
                if r + 1 < sh.rows && c > 0 {
                    e += params.pot_d2[(x[p], x[p + sh.cols - 1])];
                }
            }
            e
        })
    }

    pub fn n_vars(&self) -> usize {
        self.cards.len()
    }

    pub fn n_states(&self) -> usize {
        self.cards.iter().product()
    }

    pub fn log_potential(&self, assignment: &[usize]) -> f64 {
        (self.log_potential)(assignment)
    }

    /// Calls `f` on every joint assignment in mixed-radix order (variable 0 fastest).
    fn for_each_state(&self, mut f: impl FnMut(&[usize])) {
        let mut x = vec![0usize; self.cards.len()];
        loop {
            f(&x);
            let mut k = 0;
            loop {
                if k == x.len() {
                    return;
                }
                x[k] += 1;
                if x[k] < self.cards[k] {
                    break;
                }
                x[k] = 0;
                k += 1;
            }
        }
    }
}

/// `p(x_t | evidence)` for each target `t`, summing out every other unobserved variable.
///
/// `evidence[k]` is `Some(state)` for observed variables.
pub fn exact_conditional_marginals(pgm: &EnumerablePgm<'_>, evidence: &[Option<usize>], targets: &[usize]) -> Result<Vec<Vec<f64>>> {
    if evidence.len() != pgm.n_vars() {
        return invalid(format!("evidence covers {} of {} variables", evidence.len(), pgm.n_vars()));
    }
    for (k, e) in evidence.iter().enumerate() {
        if matches!(e, Some(s) if *s >= pgm.cards[k]) {
            return invalid(format!("evidence state out of range for variable {k}"));
        }
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= pgm.n_vars()) {
        return invalid(format!("target {t} out of range"));
    }

    let mut acc: Vec<Vec<f64>> = targets.iter().map(|&t| vec![0.0; pgm.cards[t]]).collect();
    let mut total = 0.0;
    let mut shift = f64::NEG_INFINITY;
    pgm.for_each_state(|x| {
        if evidence.iter().zip(x).any(|(e, &s)| matches!(e, Some(o) if *o != s)) {
            return;
        }
        let lp = pgm.log_potential(x);
        if lp > shift {
            // rescale what has been accumulated to the new running maximum
            let scale = (shift - lp).exp();
            total *= scale;
            acc.iter_mut().flatten().for_each(|a| *a *= scale);
            shift = lp;
        }
        let p = (lp - shift).exp();
        total += p;
        for (a, &t) in acc.iter_mut().zip(targets) {
            a[x[t]] += p;
        }
    });
    if !(total > 0.0) {
        return invalid("evidence has zero probability");
    }
    acc.iter_mut().flatten().for_each(|a| *a /= total);
    Ok(acc)
}

/// Independent exact samples by inverse-CDF over the enumerated joint.
pub fn exact_sample<R: Rng + ?Sized>(pgm: &EnumerablePgm<'_>, n: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let mut log_p = Vec::with_capacity(pgm.n_states());
    let mut states = Vec::with_capacity(pgm.n_states());
    pgm.for_each_state(|x| {
        log_p.push(pgm.log_potential(x));
        states.push(x.to_vec());
    });
    let m = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cdf = Vec::with_capacity(log_p.len());
    let mut run = 0.0;
    for lp in log_p {
        run += (lp - m).exp();
        cdf.push(run);
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * run;
            let k = cdf.partition_point(|&c| c <= u).min(states.len() - 1);
            states[k].clone()
        })
        .collect())
}

/// Central-difference gradient of `loss` over every trainable entry of `params`.
pub fn finite_diff_grad<P: Parameters>(loss: impl Fn(&P) -> f64, params: &P, h: f64) -> P {
    let mut grad = params.zeros_like();
    let sizes: Vec<usize> = params.trainable().iter().map(|s| s.len()).collect();
    let mut probe = params.clone();
    for (block, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.trainable()[block][k];
            probe.trainable_mut()[block][k] = orig + h;
            let up = loss(&probe);
            probe.trainable_mut()[block][k] = orig - h;
            let down = loss(&probe);
            probe.trainable_mut()[block][k] = orig;
            grad.trainable_mut()[block][k] = (up - down) / (2.0 * h);
        }
    }
    grad
}

/// Absolute differences below this are not scaled up by tiny magnitudes.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `max_k |a_k - b_k| / max(|a_k|, |b_k|, RELATIVE_ERROR_FLOOR)` over trainable entries.
pub fn max_relative_error<P: Parameters>(a: &P, b: &P) -> f64 {
    a.flat()
        .iter()
        .zip(b.flat())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
