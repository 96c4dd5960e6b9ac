//! Scalar kernels shared by every unrolled network.
//!
//! All arithmetic is `f64`. Functions with a `Result` return validate their
//! inputs; the lower-case `*_raw`/`*_grad` variants are the unchecked hot-loop
//! versions used inside the layer implementations.

use crate::error::{invalid, Result};

/// Magnitude at which clamped logits saturate. `logit(1) == LOGIT_CLIP`.
pub const LOGIT_CLIP: f64 = 1000.0;

/// Message-passing temperature: 0 is max-product, 1 is sum-product.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const MAX_PRODUCT: Temperature = Temperature(0.0);
    pub const SUM_PRODUCT: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return invalid(format!("temperature must be finite and >= 0, got {value}"));
        }
        Ok(Temperature(value))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn is_max_product(self) -> bool {
        self.0 == 0.0
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], saturating at `±LOGIT_CLIP` instead of `±inf`.
pub fn logit(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return invalid(format!("logit expects a probability in [0, 1], got {p}"));
    }
    let z = p.ln() - (-p).ln_1p();
    Ok(z.clamp(-LOGIT_CLIP, LOGIT_CLIP))
}

/// `T log(1 + e^{x/T})`, or `max(x, 0)` at `T = 0`.
pub fn tempered_softplus(x: f64, t: Temperature) -> Result<f64> {
    if !x.is_finite() {
        return invalid(format!("tempered_softplus: non-finite input {x}"));
    }
    Ok(tempered_softplus_raw(x, t.value()))
}

#[inline]
pub fn tempered_softplus_raw(x: f64, t: f64) -> f64 {
    if t == 0.0 {
        x.max(0.0)
    } else {
        x.max(0.0) + t * (-x.abs() / t).exp().ln_1p()
    }
}

/// `softplus(z) - z sigmoid(z)`; the derivative of `T softplus(x/T)` w.r.t. `T`.
#[inline]
fn softplus_temperature_slope(z: f64) -> f64 {
    let a = z.abs();
    softplus(-a) + a * sigmoid(-a)
}

/// Logit-space message across a binary pairwise factor of weight `w`.
///
/// `f_w(x) = sign(w) clip(x, -|w|, |w|) + sp(-|x+w|, T) - sp(-|x-w|, T)`, which at
/// `T = 1` is `log(1+e^{x+w}) - log(1+e^{x-w}) - w`.
pub fn binary_transfer(w: f64, x: f64, t: Temperature) -> Result<f64> {
    if !w.is_finite() || !x.is_finite() {
        return invalid(format!("binary_transfer: non-finite input (w={w}, x={x})"));
    }
    Ok(binary_transfer_raw(w, x, t.value()))
}

#[inline]
pub fn binary_transfer_raw(w: f64, x: f64, t: f64) -> f64 {
    let bound = w.abs();
    let sign = if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    };
    let max_product = sign * x.clamp(-bound, bound);
    if t == 0.0 {
        return max_product;
    }
    max_product + tempered_softplus_raw(-(x + w).abs(), t)
        - tempered_softplus_raw(-(x - w).abs(), t)
}

/// Value and partial derivatives of [`binary_transfer_raw`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferGrad {
    pub value: f64,
    pub dx: f64,
    pub dw: f64,
    pub dt: f64,
}

#[inline]
pub fn binary_transfer_grad(w: f64, x: f64, t: f64) -> TransferGrad {
    let value = binary_transfer_raw(w, x, t);
    let a = x + w;
    let b = x - w;
    if t == 0.0 {
        let step = |z: f64| if z > 0.0 { 1.0 } else { 0.0 };
        return TransferGrad {
            value,
            dx: step(a) - step(b),
            dw: step(a) + step(b) - 1.0,
            dt: 0.0,
        };
    }
    let (za, zb) = (a / t, b / t);
    let (sa, sb) = (sigmoid(za), sigmoid(zb));
    // sigma(za) - sigma(zb), evaluated on the side where it does not cancel
    let dx = if za > 0.0 && zb > 0.0 {
        sigmoid(-zb) - sigmoid(-za)
    } else {
        sa - sb
    };
    TransferGrad {
        value,
        dx,
        dw: sa + sb - 1.0,
        dt: softplus_temperature_slope(za) - softplus_temperature_slope(zb),
    }
}

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` for an empty slice.
#[inline]
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `T logsumexp(v / T)`, reducing to `max(v)` at `T = 0`.
#[inline]
pub fn tempered_logsumexp(v: &[f64], t: f64) -> f64 {
    if t == 0.0 {
        return v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + t * v.iter().map(|x| ((x - m) / t).exp()).sum::<f64>().ln()
}

/// Shift `v` so that its exponentials sum to one.
pub fn log_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return invalid("log_normalize of an empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("log_normalize of a non-finite vector");
    }
    let mut out = v.to_vec();
    log_normalize_in_place(&mut out);
    Ok(out)
}

#[inline]
pub fn log_normalize_in_place(v: &mut [f64]) {
    let z = logsumexp(v);
    v.iter_mut().for_each(|x| *x -= z);
}
