//! Self-verification suites run by the `check` command: exactness against
//! enumeration, gradients against finite differences, and kernel invariants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binary::{dbm_forward, dbm_loss_grad, rbm_forward, rbm_forward_bits, rbm_loss_grad, tau_for_temperature, DbmParams, RbmParams};
use crate::datasets::BorderOwnershipPair;
use crate::error::{QtError, Result};
use crate::gaussian::{grbm_forward, grbm_loss_grad, GrbmConfig, GrbmParams};
use crate::grid::{gmrf_forward, gmrf_loss_grad, EmissionNoise, GmrfParams, Label};
use crate::model::Parameters;
use crate::numerics::{binary_transfer_raw, log_normalize, logsumexp, tempered_logsumexp};
use crate::oracle::{exact_conditional_marginals, finite_diff_grad, max_relative_error, EnumerablePgm};
use crate::query::QueryMask;
use crate::tensor::Matrix;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const EXACTNESS_TOLERANCE: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const PROPERTY_CASES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Kernels,
    Rbm,
    Dbm,
    Grbm,
    Gmrf,
}

impl Scope {
    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl FromStr for Scope {
    type Err = QtError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Scope::All,
            "kernels" => Scope::Kernels,
            "rbm" => Scope::Rbm,
            "dbm" => Scope::Dbm,
            "grbm" => Scope::Grbm,
            "gmrf" => Scope::Gmrf,
            other => return Err(QtError::InvalidArgument(format!("unknown check scope `{other}`"))),
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scope::All => "all",
            Scope::Kernels => "kernels",
            Scope::Rbm => "rbm",
            Scope::Dbm => "dbm",
            Scope::Grbm => "grbm",
            Scope::Gmrf => "gmrf",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Offset (with alternating sign) added to every trainable entry before
    /// the analytic gradient is taken, while finite differences stay at the original point. Nonzero
    /// values are a negative control: the gradient suites must then fail.
    pub perturb: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { seed: 0, perturb: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub scope: Scope,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn report(scope: Scope, name: &'static str, pass: bool, detail: String) -> SuiteReport {
    SuiteReport { scope, name, pass, detail }
}

/// Runs every suite in `scope`. Errors inside a suite are reported as failures.
pub fn run_checks(scope: Scope, opts: &CheckOptions) -> Vec<SuiteReport> {
    type Suite = fn(&CheckOptions) -> Result<(bool, String)>;
    let suites: [(Scope, &'static str, Suite); 10] = [
        (Scope::Kernels, "transfer properties", transfer_properties),
        (Scope::Kernels, "log-space helpers", log_space_helpers),
        (Scope::Rbm, "tree exactness", rbm_tree_exactness),
        (Scope::Rbm, "gradient", rbm_gradient),
        (Scope::Dbm, "reduction to rbm", dbm_reduction),
        (Scope::Dbm, "gradient", dbm_gradient),
        (Scope::Grbm, "zero coupling recovers the prior", grbm_zero_coupling),
        (Scope::Grbm, "gradient", grbm_gradient),
        (Scope::Gmrf, "strip exactness and invariances", gmrf_exactness),
        (Scope::Gmrf, "gradient", gmrf_gradient),
    ];
    suites
        .into_iter()
        .filter(|(s, _, _)| scope.includes(*s))
        .map(|(s, name, f)| match f(opts) {
            Ok((pass, detail)) => report(s, name, pass, detail),
            Err(e) => report(s, name, false, format!("error: {e}")),
        })
        .collect()
}

fn rng_for(opts: &CheckOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn uniform(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn uniform_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn random_rbm(h: usize, v: usize, rng: &mut ChaCha8Rng) -> Result<RbmParams> {
    let w = uniform_matrix(h, v, 1.0, rng);
    RbmParams::with_temperature(w, uniform(v, 1.0, rng), uniform(h, 1.0, rng), 1.0)
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> QueryMask {
    let q = QueryMask::new((0..n).map(|_| rng.random_bool(0.5)).collect());
    if q.n_targets() == 0 {
        QueryMask::all_targets(n)
    } else {
        q
    }
}

fn random_bits(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2)).collect()
}

/// Compares the analytic gradient (taken at the perturbed point) to central differences.
fn gradient_check<P: Parameters>(params: &P, opts: &CheckOptions, loss_grad: impl Fn(&P) -> Result<(f64, P)>) -> Result<(bool, String)> {
    let mut at = params.clone();
    for block in at.trainable_mut() {
        // alternating signs, since a uniform shift of a log-potential table changes nothing
        for (k, x) in block.iter_mut().enumerate() {
            *x += if k % 2 == 0 { opts.perturb } else { -opts.perturb };
        }
    }
    let (_, analytic) = loss_grad(&at)?;
    loss_grad(params)?;
    // a failing evaluation shows up as NaN, which never passes the comparison
    let fd = finite_diff_grad(|p: &P| loss_grad(p).map_or(f64::NAN, |(l, _)| l), params, FD_STEP);
    let err = max_relative_error(&analytic, &fd);
    Ok((err < GRADIENT_TOLERANCE, format!("max relative error {err:.2e} over {} entries (tol {GRADIENT_TOLERANCE:.0e})", params.n_trainable())))
}

fn transfer_properties(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 1);
    let mut violations = 0usize;
    for _ in 0..PROPERTY_CASES {
        let w = rng.random_range(-5.0..5.0);
        let x = rng.random_range(-20.0..20.0);
        let t = rng.random_range(0.05..3.0);
        let f = binary_transfer_raw(w, x, t);
        let odd = (f + binary_transfer_raw(w, -x, t)).abs() <= 1e-12;
        let bounded = f.abs() <= w.abs() + 1e-12;
        let dx = rng.random_range(0.0..1.0);
        let g = binary_transfer_raw(w, x + dx, t);
        let monotone = if w >= 0.0 { g >= f - 1e-12 } else { g <= f + 1e-12 };
        let cold = (binary_transfer_raw(w, x, 1e-6) - binary_transfer_raw(w, x, 0.0)).abs() <= 1e-5;
        violations += !(odd && bounded && monotone && cold) as usize;
    }
    Ok((violations == 0, format!("{violations} violations in {PROPERTY_CASES} cases (odd symmetry, saturation, monotonicity, cold limit)")))
}

fn log_space_helpers(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..PROPERTY_CASES {
        let v = uniform(rng.random_range(1..8), 30.0, &mut rng);
        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        worst = worst.max((logsumexp(&shifted) - logsumexp(&v) - shift).abs());
        let a = log_normalize(&v)?;
        let b = log_normalize(&shifted)?;
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        worst = worst.max(logsumexp(&a).abs());
        // T logsumexp(v / T) lies in [max, max + T ln n]
        let t = 1e-3;
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let excess = tempered_logsumexp(&v, t) - max;
        worst = worst.max((excess - excess.clamp(0.0, t * (v.len() as f64).ln())).abs());
    }
    Ok((worst < 1e-9, format!("max deviation {worst:.1e} over {PROPERTY_CASES} cases (tol 1e-9)")))
}

fn rbm_tree_exactness(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = rng.random_range(2..9);
        let p = random_rbm(1, v, &mut rng)?;
        let bits = random_bits(v, &mut rng);
        let q = random_mask(v, &mut rng);
        let out = rbm_forward_bits(&p, &bits, &q, 10)?;
        let pgm = EnumerablePgm::rbm(&p)?;
        let mut evidence: Vec<Option<usize>> = (0..v).map(|j| q.is_evidence(j).then_some(bits[j] as usize)).collect();
        evidence.push(None);
        let targets: Vec<usize> = (0..v).filter(|&j| !q.is_evidence(j)).collect();
        let exact = exact_conditional_marginals(&pgm, &evidence, &targets)?;
        for (&t, m) in targets.iter().zip(&exact) {
            worst = worst.max((out.v_hat[t] - m[1]).abs());
        }
    }
    Ok((worst < EXACTNESS_TOLERANCE, format!("max abs error {worst:.1e} on 20 single-hidden-unit trees (tol {EXACTNESS_TOLERANCE:.0e})")))
}

fn rbm_gradient(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 4);
    let mut p = random_rbm(4, 6, &mut rng)?;
    p.tau = tau_for_temperature(0.9)?;
    let v = random_bits(6, &mut rng);
    let q = random_mask(6, &mut rng);
    gradient_check(&p, opts, |p: &RbmParams| rbm_loss_grad(p, &v, &q, 5))
}

fn dbm_reduction(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (nv, h1, h2) = (rng.random_range(2..8), rng.random_range(1..5), rng.random_range(1..4));
        let rbm = random_rbm(h1, nv, &mut rng)?;
        let dbm = DbmParams::new(rbm.w.clone(), Matrix::zeros(h2, h1), rbm.c_v.clone(), rbm.c_h.clone(), uniform(h2, 1.0, &mut rng), rbm.tau)?;
        let x: Vec<f64> = (0..nv).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let q = random_mask(nv, &mut rng);
        let a = rbm_forward(&rbm, &x, &q, 8)?;
        let b = dbm_forward(&dbm, &x, &q, 8)?;
        worst = a.v_hat.iter().zip(&b.v_hat).map(|(p, r)| (p - r).abs()).fold(worst, f64::max);
    }
    Ok((worst <= 1e-15, format!("max abs difference {worst:.1e} with the top layer decoupled (tol 1e-15)")))
}

fn dbm_gradient(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 6);
    let p = DbmParams::new(
        uniform_matrix(3, 5, 1.0, &mut rng),
        uniform_matrix(2, 3, 1.0, &mut rng),
        uniform(5, 1.0, &mut rng),
        uniform(3, 1.0, &mut rng),
        uniform(2, 1.0, &mut rng),
        tau_for_temperature(1.1)?,
    )?;
    let v = random_bits(5, &mut rng);
    let q = random_mask(5, &mut rng);
    gradient_check(&p, opts, |p: &DbmParams| dbm_loss_grad(p, &v, &q, 5))
}

fn grbm_zero_coupling(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 7);
    let cfg = GrbmConfig::new(0.01, 10)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (h, v) = (rng.random_range(1..5), rng.random_range(2..8));
        let p = GrbmParams::new(Matrix::zeros(h, v), uniform(v, 2.0, &mut rng), uniform(h, 1.0, &mut rng))?;
        let x = uniform(v, 2.0, &mut rng);
        let q = random_mask(v, &mut rng);
        let out = grbm_forward(&p, &x, &q, &cfg)?;
        for j in (0..v).filter(|&j| !q.is_evidence(j)) {
            worst = worst.max((out.mean[j] - p.b[j]).abs()).max((out.var[j] - 1.0).abs());
        }
    }
    Ok((worst < 1e-12, format!("max deviation from N(b, 1) {worst:.1e} (tol 1e-12)")))
}

fn grbm_gradient(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 8);
    let p = GrbmParams::new(uniform_matrix(2, 4, 0.8, &mut rng), uniform(4, 0.5, &mut rng), uniform(2, 0.5, &mut rng))?;
    let cfg = GrbmConfig::new(0.01, 5)?;
    let x = uniform(4, 1.0, &mut rng);
    let q = random_mask(4, &mut rng);
    gradient_check(&p, opts, |p: &GrbmParams| grbm_loss_grad(p, &x, &q, &cfg))
}

fn random_gmrf(k: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<GmrfParams> {
    let tables = [(); 4].map(|_| uniform_matrix(k, k, scale, rng));
    GmrfParams::new(tables, EmissionNoise::new(0.8, 0.1, 0.05)?, 1.0)
}

/// A single row has no diagonal neighbours, so BP runs on a chain and is exact.
fn gmrf_exactness(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 9);
    let (mut exact_err, mut invariance_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let cols = rng.random_range(2..6);
        let p = random_gmrf(3, 1.5, &mut rng)?;
        let image = random_bits(cols, &mut rng);
        let out = gmrf_forward(&p, &image, 1, cols, cols + 1)?;
        let pgm = EnumerablePgm::grid(&p, &out.trace.unary)?;
        let exact = exact_conditional_marginals(&pgm, &vec![None; cols], &(0..cols).collect::<Vec<_>>())?;
        for (px, m) in exact.iter().enumerate() {
            exact_err = out.pixel(px).iter().zip(m).map(|(a, b)| (a - b).abs()).fold(exact_err, f64::max);
        }

        // adding a constant to any table changes no belief
        let mut shifted = random_gmrf(3, 1.5, &mut rng)?;
        let image = random_bits(9, &mut rng);
        let base = gmrf_forward(&shifted, &image, 3, 3, 4)?;
        for (kind, m) in [&mut shifted.pot_ud, &mut shifted.pot_lr, &mut shifted.pot_d1, &mut shifted.pot_d2].into_iter().enumerate() {
            let c = 3.0 * (kind as f64 + 1.0);
            m.as_mut_slice().iter_mut().for_each(|x| *x += c);
        }
        let moved = gmrf_forward(&shifted, &image, 3, 3, 4)?;
        invariance_err = base.beliefs.iter().zip(&moved.beliefs).map(|(a, b)| (a - b).abs()).fold(invariance_err, f64::max);
        for px in 0..9 {
            invariance_err = invariance_err.max((moved.pixel(px).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok((
        exact_err < EXACTNESS_TOLERANCE && invariance_err < 1e-9,
        format!("chain error {exact_err:.1e} (tol {EXACTNESS_TOLERANCE:.0e}), shift and normalization error {invariance_err:.1e} (tol 1e-9)"),
    ))
}

fn gmrf_gradient(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = rng_for(opts, 10);
    let p = random_gmrf(3, 0.5, &mut rng)?;
    let labels: Vec<Label> = (0..36).map(|_| Label::ALL[rng.random_range(0..3)]).collect();
    let pair = BorderOwnershipPair {
        rows: 6,
        cols: 6,
        image: random_bits(36, &mut rng),
        labels,
    };
    gradient_check(&p, opts, |p: &GmrfParams| gmrf_loss_grad(p, &pair, 4))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let reports = run_checks(Scope::All, &CheckOptions::default());
        assert_eq!(reports.len(), 10);
        for r in &reports {
            assert!(r.pass, "{} {}: {}", r.scope, r.name, r.detail);
        }
    }

    #[test]
    fn perturbed_weights_fail_every_gradient_suite() {
        let opts = CheckOptions { seed: 3, perturb: 0.05 };
        for scope in [Scope::Rbm, Scope::Dbm, Scope::Grbm, Scope::Gmrf] {
            let reports = run_checks(scope, &opts);
            let grad = reports.iter().find(|r| r.name == "gradient").unwrap();
            assert!(!grad.pass, "{scope}: {}", grad.detail);
        }
    }

    #[test]
    fn scope_filters_suites() {
        let reports = run_checks(Scope::Grbm, &CheckOptions::default());
        assert!(reports.iter().all(|r| r.scope == Scope::Grbm));
        assert_eq!(reports.len(), 2);
        assert!("everything".parse::<Scope>().is_err());
        assert_eq!("gmrf".parse::<Scope>().unwrap(), Scope::Gmrf);
    }
}
