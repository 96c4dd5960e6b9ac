//! Query masks, query distributions and the masked cross-entropy objective.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, QtError, Result};

const PROB_FLOOR: f64 = 1e-12;

/// Marks each visible variable as evidence (`true`) or as a target to predict (`false`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryMask(Vec<bool>);

impl QueryMask {
    pub fn new(evidence: Vec<bool>) -> Self {
        QueryMask(evidence)
    }

    pub fn all_evidence(len: usize) -> Self {
        QueryMask(vec![true; len])
    }

    pub fn all_targets(len: usize) -> Self {
        QueryMask(vec![false; len])
    }

    /// Builds a mask from `{0, 1}` entries.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => invalid(format!("query mask entries must be 0 or 1, got {other}")),
            })
            .collect::<Result<Vec<_>>>()
            .map(QueryMask)
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&e| e as u8).collect()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn is_evidence(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn n_targets(&self) -> usize {
        self.0.iter().filter(|&&e| !e).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Appends `n` evidence entries.
    pub fn extended(&self, n: usize, evidence: bool) -> QueryMask {
        let mut v = self.0.clone();
        v.extend(std::iter::repeat_n(evidence, n));
        QueryMask(v)
    }
}

/// Distribution over query masks.
#[derive(Debug, Clone, PartialEq)]
pub enum QuerySpec {
    /// Every variable is independently evidence with probability `p_observe`.
    Bernoulli { p_observe: f64 },
    /// The same stored mask for every sample.
    Fixed(QueryMask),
    /// All evidence except one uniformly placed `height x width` block of targets.
    Patch { height: usize, width: usize },
}

impl QuerySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            QuerySpec::Bernoulli { p_observe } if !(0.0..=1.0).contains(p_observe) => {
                invalid(format!("p_observe must lie in [0, 1], got {p_observe}"))
            }
            QuerySpec::Patch { height, width } if *height == 0 || *width == 0 => {
                invalid("patch dimensions must be positive")
            }
            _ => Ok(()),
        }
    }

    /// Checks that masks drawn from this spec can contain targets at all.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        match self {
            QuerySpec::Bernoulli { p_observe } if *p_observe >= 1.0 => {
                invalid("p_observe = 1 never leaves a variable to predict")
            }
            QuerySpec::Fixed(m) if m.n_targets() == 0 => invalid("fixed query has no targets"),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for QuerySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuerySpec::Bernoulli { p_observe } => write!(f, "bernoulli:{p_observe}"),
            QuerySpec::Patch { height, width } => write!(f, "patch:{height}x{width}"),
            QuerySpec::Fixed(m) => {
                write!(f, "fixed:")?;
                m.to_bits().iter().try_for_each(|b| write!(f, "{b}"))
            }
        }
    }
}

impl FromStr for QuerySpec {
    type Err = QtError;

    /// Parses `bernoulli:0.5`, `patch:5x5` or `fixed:0110...`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let bad = || QtError::InvalidArgument(format!("cannot parse query spec `{s}`"));
        let spec = match kind.trim() {
            "bernoulli" => QuerySpec::Bernoulli {
                p_observe: if arg.is_empty() {
                    0.5
                } else {
                    arg.trim().parse().map_err(|_| bad())?
                },
            },
            "patch" => {
                let (h, w) = arg.split_once('x').ok_or_else(bad)?;
                QuerySpec::Patch {
                    height: h.trim().parse().map_err(|_| bad())?,
                    width: w.trim().parse().map_err(|_| bad())?,
                }
            }
            "fixed" => {
                let bits = arg
                    .trim()
                    .chars()
                    .map(|c| c.to_digit(10).map(|d| d as u8).ok_or_else(bad))
                    .collect::<Result<Vec<_>>>()?;
                QuerySpec::Fixed(QueryMask::from_bits(&bits)?)
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws a mask over a `rows x cols` grid of variables (use `rows = 1` for flat vectors).
pub fn sample_query<R: Rng + ?Sized>(
    spec: &QuerySpec,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<QueryMask> {
    spec.validate()?;
    let len = rows * cols;
    match spec {
        QuerySpec::Bernoulli { p_observe } => {
            let p = *p_observe;
            Ok(QueryMask((0..len).map(|_| rng.random::<f64>() < p).collect()))
        }
        QuerySpec::Fixed(m) => {
            if m.len() != len {
                return invalid(format!("fixed query has {} entries, expected {len}", m.len()));
            }
            Ok(m.clone())
        }
        QuerySpec::Patch { height, width } => {
            if *height > rows || *width > cols {
                return invalid(format!(
                    "patch {height}x{width} does not fit in a {rows}x{cols} grid"
                ));
            }
            let r0 = rng.random_range(0..=rows - height);
            let c0 = rng.random_range(0..=cols - width);
            let mut mask = vec![true; len];
            for r in r0..r0 + height {
                for c in c0..c0 + width {
                    mask[r * cols + c] = false;
                }
            }
            Ok(QueryMask(mask))
        }
    }
}

/// Like [`sample_query`], but redraws masks that have no targets.
pub fn sample_training_query<R: Rng + ?Sized>(
    spec: &QuerySpec,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<QueryMask> {
    spec.validate_for_training()?;
    loop {
        let q = sample_query(spec, rows, cols, rng)?;
        if q.n_targets() > 0 {
            return Ok(q);
        }
    }
}

/// Cross-entropy in bits summed over target positions, with the target count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CrossEntropy {
    pub total_bits: f64,
    pub n_predicted: usize,
}

impl CrossEntropy {
    pub fn add(&mut self, other: CrossEntropy) {
        self.total_bits += other.total_bits;
        self.n_predicted += other.n_predicted;
    }

    pub fn nce(&self) -> Result<f64> {
        nce(self.total_bits, self.n_predicted)
    }
}

/// Binary cross-entropy over variables the query marks as targets.
pub fn masked_ce_binary(v: &[u8], v_hat: &[f64], q: &QueryMask) -> Result<CrossEntropy> {
    if v.len() != v_hat.len() || v.len() != q.len() {
        return invalid("masked_ce_binary: length mismatch");
    }
    let mut ce = CrossEntropy::default();
    for j in (0..v.len()).filter(|&j| !q.is_evidence(j)) {
        let p = v_hat[j].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        ce.total_bits -= if v[j] == 1 { p.log2() } else { (1.0 - p).log2() };
        ce.n_predicted += 1;
    }
    Ok(ce)
}

/// `-log2 N(v; mean, var)` summed over target positions.
pub fn masked_ce_gaussian(v: &[f64], mean: &[f64], var: &[f64], q: &QueryMask) -> Result<CrossEntropy> {
    if v.len() != mean.len() || v.len() != var.len() || v.len() != q.len() {
        return invalid("masked_ce_gaussian: length mismatch");
    }
    let mut ce = CrossEntropy::default();
    for j in (0..v.len()).filter(|&j| !q.is_evidence(j)) {
        ce.total_bits += gaussian_nll_bits(v[j], mean[j], var[j])?;
        ce.n_predicted += 1;
    }
    Ok(ce)
}

pub fn gaussian_nll_bits(x: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(QtError::NumericalDomain(format!(
            "Gaussian predictive variance must be positive, got {var}"
        )));
    }
    let nats = 0.5 * (2.0 * PI * var).ln() + (x - mean).powi(2) / (2.0 * var);
    Ok(nats / std::f64::consts::LN_2)
}

/// Categorical cross-entropy over every pixel; `probs[k]` is a distribution over classes.
pub fn ce_categorical(truth: &[usize], probs: &[[f64; 3]]) -> Result<CrossEntropy> {
    if truth.len() != probs.len() {
        return invalid("ce_categorical: length mismatch");
    }
    let mut ce = CrossEntropy::default();
    for (&t, p) in truth.iter().zip(probs) {
        if t >= 3 {
            return invalid(format!("class index {t} out of range"));
        }
        ce.total_bits -= p[t].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).log2();
        ce.n_predicted += 1;
    }
    Ok(ce)
}

/// Normalized cross-entropy: average bits per predicted variable.
pub fn nce(total_bits: f64, n_predicted: usize) -> Result<f64> {
    if n_predicted == 0 {
        return invalid("query has no targets; NCE is undefined");
    }
    Ok(total_bits / n_predicted as f64)
}
