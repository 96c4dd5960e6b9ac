//! Adam, the minibatch training loop and per-model training adapters.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::binary::{dbm_forward_bits, dbm_loss_grad, rbm_forward_bits, rbm_loss_grad, DbmParams, RbmParams};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::datasets::BorderOwnershipPair;
use crate::error::{invalid, QtError, Result};
use crate::gaussian::{grbm_forward, grbm_loss_grad, GrbmConfig, GrbmParams, DEFAULT_EPSILON};
use crate::grid::{aggregate_labels, gmrf_forward, gmrf_loss_grad, GmrfParams};
use crate::model::Parameters;
use crate::query::{ce_categorical, masked_ce_binary, masked_ce_gaussian, sample_query, sample_training_query, CrossEntropy, QueryMask, QuerySpec};

/// Mixed into the seed to derive the fixed validation query stream.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates over the flattened trainable entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamState {
    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// One bias-corrected Adam update. A fresh (empty) state is sized on first use.
pub fn adam_step<P: Parameters>(state: &mut AdamState, params: &mut P, grads: &P, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.n_trainable();
    if grads.n_trainable() != n {
        return invalid("gradient bundle does not match the parameters");
    }
    if state.m.is_empty() {
        state.m = vec![0.0; n];
        state.v = vec![0.0; n];
    } else if state.m.len() != n {
        return invalid("optimizer state does not match the parameters");
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step);
    let c2 = 1.0 - cfg.beta2.powi(state.step);
    let g_all = grads.flat();
    let mut k = 0;
    for slice in params.trainable_mut() {
        for x in slice.iter_mut() {
            let g = g_all[k];
            state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
            state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[k] / c1;
            let v_hat = state.v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            k += 1;
        }
    }
    Ok(())
}

/// Network settings shared by training, evaluation and inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub n_layers: usize,
    /// Evidence variance for Gaussian models.
    pub epsilon: f64,
    /// Layout of the visible variables for patch queries; `None` means one row.
    pub grid: Option<(usize, usize)>,
}

impl NetConfig {
    pub fn new(n_layers: usize) -> Self {
        NetConfig {
            n_layers,
            epsilon: DEFAULT_EPSILON,
            grid: None,
        }
    }

    fn layout(&self, n_vars: usize) -> Result<(usize, usize)> {
        match self.grid {
            None => Ok((1, n_vars)),
            Some((r, c)) if r * c == n_vars => Ok((r, c)),
            Some((r, c)) => invalid(format!("grid {r}x{c} does not cover {n_vars} variables")),
        }
    }

    pub fn to_hyper(&self) -> Vec<(String, f64)> {
        let mut h = vec![("n_layers".to_string(), self.n_layers as f64), ("epsilon".to_string(), self.epsilon)];
        if let Some((r, c)) = self.grid {
            h.push(("grid_rows".to_string(), r as f64));
            h.push(("grid_cols".to_string(), c as f64));
        }
        h
    }

    pub fn from_meta(meta: &CheckpointMeta) -> Result<Self> {
        let n_layers = meta.hyper("n_layers").ok_or_else(|| QtError::Format {
            field: "hyper",
            msg: "checkpoint does not record n_layers".into(),
        })?;
        let grid = match (meta.hyper("grid_rows"), meta.hyper("grid_cols")) {
            (Some(r), Some(c)) => Some((r as usize, c as usize)),
            _ => None,
        };
        Ok(NetConfig {
            n_layers: n_layers as usize,
            epsilon: meta.hyper("epsilon").unwrap_or(DEFAULT_EPSILON),
            grid,
        })
    }
}

/// A model that can be trained on query-masked data.
pub trait Trainable: Parameters {
    type Sample: Send + Sync;
    type Query: Send + Sync;

    /// Draws the query for one sample. Training queries always have a target.
    fn draw_query<R: Rng + ?Sized>(&self, net: &NetConfig, spec: &QuerySpec, sample: &Self::Sample, training: bool, rng: &mut R) -> Result<Self::Query>;

    /// Loss in nats, number of predicted variables, and gradient.
    fn loss_grad(&self, net: &NetConfig, sample: &Self::Sample, query: &Self::Query) -> Result<(f64, usize, Self)>;

    fn evaluate(&self, net: &NetConfig, sample: &Self::Sample, query: &Self::Query) -> Result<CrossEntropy>;
}

fn draw_mask<R: Rng + ?Sized>(net: &NetConfig, spec: &QuerySpec, n_vars: usize, training: bool, rng: &mut R) -> Result<QueryMask> {
    let (r, c) = net.layout(n_vars)?;
    if training {
        sample_training_query(spec, r, c, rng)
    } else {
        sample_query(spec, r, c, rng)
    }
}

impl Trainable for RbmParams {
    type Sample = Vec<u8>;
    type Query = QueryMask;

    fn draw_query<R: Rng + ?Sized>(&self, net: &NetConfig, spec: &QuerySpec, _: &Vec<u8>, training: bool, rng: &mut R) -> Result<QueryMask> {
        draw_mask(net, spec, self.visible(), training, rng)
    }

    fn loss_grad(&self, net: &NetConfig, v: &Vec<u8>, q: &QueryMask) -> Result<(f64, usize, Self)> {
        let (loss, g) = rbm_loss_grad(self, v, q, net.n_layers)?;
        Ok((loss, q.n_targets(), g))
    }

    fn evaluate(&self, net: &NetConfig, v: &Vec<u8>, q: &QueryMask) -> Result<CrossEntropy> {
        let out = rbm_forward_bits(self, v, q, net.n_layers)?;
        masked_ce_binary(v, &out.v_hat, q)
    }
}

impl Trainable for DbmParams {
    type Sample = Vec<u8>;
    type Query = QueryMask;

    fn draw_query<R: Rng + ?Sized>(&self, net: &NetConfig, spec: &QuerySpec, _: &Vec<u8>, training: bool, rng: &mut R) -> Result<QueryMask> {
        draw_mask(net, spec, self.visible(), training, rng)
    }

    fn loss_grad(&self, net: &NetConfig, v: &Vec<u8>, q: &QueryMask) -> Result<(f64, usize, Self)> {
        let (loss, g) = dbm_loss_grad(self, v, q, net.n_layers)?;
        Ok((loss, q.n_targets(), g))
    }

    fn evaluate(&self, net: &NetConfig, v: &Vec<u8>, q: &QueryMask) -> Result<CrossEntropy> {
        let out = dbm_forward_bits(self, v, q, net.n_layers)?;
        masked_ce_binary(v, &out.v_hat, q)
    }
}

impl Trainable for GrbmParams {
    type Sample = Vec<f64>;
    type Query = QueryMask;

    fn draw_query<R: Rng + ?Sized>(&self, net: &NetConfig, spec: &QuerySpec, _: &Vec<f64>, training: bool, rng: &mut R) -> Result<QueryMask> {
        draw_mask(net, spec, self.visible(), training, rng)
    }

    fn loss_grad(&self, net: &NetConfig, v: &Vec<f64>, q: &QueryMask) -> Result<(f64, usize, Self)> {
        let cfg = GrbmConfig::new(net.epsilon, net.n_layers)?;
        let (loss, g) = grbm_loss_grad(self, v, q, &cfg)?;
        Ok((loss, q.n_targets(), g))
    }

    fn evaluate(&self, net: &NetConfig, v: &Vec<f64>, q: &QueryMask) -> Result<CrossEntropy> {
        let cfg = GrbmConfig::new(net.epsilon, net.n_layers)?;
        let out = grbm_forward(self, v, q, &cfg)?;
        masked_ce_gaussian(v, &out.mean, &out.var, q)
    }
}

/// Every pixel label is predicted from the full image, so there is no query to draw.
impl Trainable for GmrfParams {
    type Sample = BorderOwnershipPair;
    type Query = ();

    fn draw_query<R: Rng + ?Sized>(&self, _: &NetConfig, _: &QuerySpec, _: &BorderOwnershipPair, _: bool, _: &mut R) -> Result<()> {
        Ok(())
    }

    fn loss_grad(&self, net: &NetConfig, pair: &BorderOwnershipPair, _: &()) -> Result<(f64, usize, Self)> {
        let (loss, g) = gmrf_loss_grad(self, pair, net.n_layers)?;
        Ok((loss, pair.labels.len(), g))
    }

    fn evaluate(&self, net: &NetConfig, pair: &BorderOwnershipPair, _: &()) -> Result<CrossEntropy> {
        let out = gmrf_forward(self, &pair.image, pair.rows, pair.cols, net.n_layers)?;
        let probs: Vec<[f64; 3]> = aggregate_labels(&out.beliefs, self.n_states())?.iter().map(|p| p.by_code()).collect();
        let truth: Vec<usize> = pair.labels.iter().map(|l| l.code() as usize).collect();
        ce_categorical(&truth, &probs)
    }
}

/// Cross-entropy of `params` over `data`, with queries drawn from a stream seeded by `seed`.
pub fn evaluate<P: Trainable>(params: &P, net: &NetConfig, spec: &QuerySpec, data: &[P::Sample], seed: u64) -> Result<CrossEntropy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = data
        .iter()
        .map(|s| params.draw_query(net, spec, s, false, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let parts = data
        .par_iter()
        .zip(&queries)
        .map(|(s, q)| params.evaluate(net, s, q))
        .collect::<Result<Vec<_>>>()?;
    let mut total = CrossEntropy::default();
    parts.into_iter().for_each(|ce| total.add(ce));
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub lr: f64,
    /// Learning rates to select from on validation NCE; empty means just `lr`.
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub query: QuerySpec,
    pub adam: AdamConfig,
    /// Record elapsed time in metrics; disable for byte-reproducible streams.
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn new(net: NetConfig, query: QuerySpec) -> Self {
        TrainConfig {
            net,
            lr: 0.01,
            lr_grid: Vec::new(),
            batch_size: 500,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            query,
            adam: AdamConfig::default(),
            wall_clock: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.n_layers == 0 {
            return invalid("n_layers must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return invalid("max_epochs must be positive");
        }
        if let Some(&lr) = self.rates().iter().find(|&&lr| !(lr > 0.0) || !lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {lr}"));
        }
        self.query.validate_for_training()
    }

    pub fn rates(&self) -> Vec<f64> {
        if self.lr_grid.is_empty() {
            vec![self.lr]
        } else {
            self.lr_grid.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss_bits: f64,
    pub nce: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub best: Checkpoint<P>,
    pub metrics: Vec<EpochRecord>,
    /// Learning rates abandoned after a non-finite loss or a numerical domain error.
    pub diverged: Vec<(f64, usize)>,
}

fn is_divergence(e: &QtError) -> bool {
    matches!(e, QtError::NumericalDomain(_))
}

struct RunResult<P> {
    best: P,
    best_epoch: usize,
    best_nce: f64,
}

/// Trains from `init` once per learning rate and keeps the best validation checkpoint.
///
/// `on_record` sees every metrics record as it is produced.
pub fn train<P: Trainable>(
    init: &P,
    cfg: &TrainConfig,
    train_set: &[P::Sample],
    val_set: &[P::Sample],
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<P>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return invalid("training and validation sets must be nonempty");
    }
    let mut metrics = Vec::new();
    let mut diverged = Vec::new();
    let mut best: Option<(f64, RunResult<P>)> = None;
    for lr in cfg.rates() {
        let mut emit = |r: EpochRecord| {
            on_record(&r);
            metrics.push(r);
        };
        match train_one(init, cfg, lr, train_set, val_set, &mut emit) {
            Ok(run) => {
                info!("lr {lr}: best validation NCE {:.4} at epoch {}", run.best_nce, run.best_epoch);
                if best.as_ref().is_none_or(|(_, b)| run.best_nce < b.best_nce) {
                    best = Some((lr, run));
                }
            }
            Err(QtError::Diverged { epoch, lr }) => {
                warn!("lr {lr} diverged at epoch {epoch}");
                diverged.push((lr, epoch));
            }
            Err(e) => return Err(e),
        }
    }
    let Some((lr, run)) = best else {
        let (lr, epoch) = diverged.last().copied().unwrap_or((cfg.lr, 0));
        return Err(QtError::Diverged { epoch, lr });
    };
    Ok(TrainOutcome {
        best: Checkpoint {
            params: run.best,
            meta: CheckpointMeta {
                epoch: run.best_epoch as u64,
                best_val_nce: run.best_nce,
                seed: cfg.seed,
                lr,
                hyper: cfg.net.to_hyper(),
            },
        },
        metrics,
        diverged,
    })
}

fn train_one<P: Trainable>(
    init: &P,
    cfg: &TrainConfig,
    lr: f64,
    train_set: &[P::Sample],
    val_set: &[P::Sample],
    emit: &mut impl FnMut(EpochRecord),
) -> Result<RunResult<P>> {
    let start = Instant::now();
    let elapsed = || if cfg.wall_clock { start.elapsed().as_millis() as u64 } else { 0 };
    let eval_seed = cfg.seed ^ EVAL_SEED_SALT;
    let net = &cfg.net;
    let diverge = |epoch| QtError::Diverged { epoch, lr };

    let validate = |p: &P, epoch: usize| -> Result<EpochRecord> {
        let ce = match evaluate(p, net, &cfg.query, val_set, eval_seed) {
            Err(e) if is_divergence(&e) => return Err(diverge(epoch)),
            other => other?,
        };
        if !ce.total_bits.is_finite() {
            return Err(diverge(epoch));
        }
        Ok(EpochRecord {
            epoch,
            split: Split::Validation,
            loss_bits: ce.total_bits / val_set.len() as f64,
            nce: ce.nce()?,
            lr,
            wall_ms: elapsed(),
        })
    };

    let mut params = init.clone();
    let mut opt = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let first = validate(&params, 0)?;
    let mut run = RunResult {
        best: params.clone(),
        best_epoch: 0,
        best_nce: first.nce,
    };
    emit(first);
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_nats, mut n_pred) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let queries = batch
                .iter()
                .map(|&i| params.draw_query(net, &cfg.query, &train_set[i], true, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let parts = batch
                .par_iter()
                .zip(&queries)
                .map(|(&i, q)| params.loss_grad(net, &train_set[i], q))
                .collect::<Vec<_>>();
            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for part in parts {
                let (loss, n, g) = match part {
                    Err(e) if is_divergence(&e) => return Err(diverge(epoch)),
                    other => other?,
                };
                batch_loss += loss;
                n_pred += n;
                grad.add_scaled(&g, 1.0);
            }
            if !batch_loss.is_finite() || !grad.all_finite() {
                return Err(diverge(epoch));
            }
            loss_nats += batch_loss;
            grad.scale(1.0 / batch.len() as f64);
            adam_step(&mut opt, &mut params, &grad, lr, &cfg.adam)?;
            if !params.all_finite() {
                return Err(diverge(epoch));
            }
        }
        let bits = loss_nats / std::f64::consts::LN_2;
        emit(EpochRecord {
            epoch,
            split: Split::Train,
            loss_bits: bits / train_set.len() as f64,
            nce: if n_pred == 0 { f64::NAN } else { bits / n_pred as f64 },
            lr,
            wall_ms: elapsed(),
        });
        let rec = validate(&params, epoch)?;
        let nce = rec.nce;
        emit(rec);
        if nce < run.best_nce {
            run = RunResult {
                best: params.clone(),
                best_epoch: epoch,
                best_nce: nce,
            };
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_sample, EnumerablePgm};
    use crate::tensor::Matrix;

    fn quadratic(x: &[f64]) -> RbmParams {
        RbmParams::new(Matrix::from_vec(1, x.len(), x.to_vec()).unwrap(), vec![0.0; x.len()], vec![0.0], 0.0).unwrap()
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut p = quadratic(&[1.0, -2.0, 0.5]);
        let g = quadratic(&[0.3, -5.0, 0.0]);
        let mut s = AdamState::default();
        adam_step(&mut s, &mut p, &g, 0.01, &AdamConfig::default()).unwrap();
        assert!((p.w[(0, 0)] - (1.0 - 0.01)).abs() < 1e-6 * 0.01);
        assert!((p.w[(0, 1)] - (-2.0 + 0.01)).abs() < 1e-6 * 0.01);
        assert_eq!(p.w[(0, 2)], 0.5);
        assert_eq!(s.steps(), 1);
        let before = p.w[(0, 0)];
        adam_step(&mut s, &mut p, &g, 0.01, &AdamConfig::default()).unwrap();
        assert!(p.w[(0, 0)] < before);
    }

    fn desk_data(n: usize, seed: u64) -> (RbmParams, Vec<Vec<u8>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let truth = RbmParams::new(w, vec![0.2; 6], vec![-0.1; 3], 0.0).unwrap();
        let samples = {
            let pgm = EnumerablePgm::rbm(&truth).unwrap();
            exact_sample(&pgm, n, &mut rng)
                .unwrap()
                .into_iter()
                .map(|s| s[..6].iter().map(|&x| x as u8).collect())
                .collect()
        };
        (truth, samples)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 50,
            max_epochs: 3,
            patience: 2,
            seed: 11,
            lr: 0.03,
            wall_clock: false,
            ..TrainConfig::new(NetConfig::new(4), QuerySpec::Bernoulli { p_observe: 0.5 })
        }
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (_, data) = desk_data(400, 3);
        let init = RbmParams::init(6, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let cfg = small_config();
        let a = train(&init, &cfg, &data[..300], &data[300..], |_| {}).unwrap();
        let b = train(&init, &cfg, &data[..300], &data[300..], |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        assert!(a.best.meta.best_val_nce < a.metrics[0].nce);
        let lines: Vec<String> = a.metrics.iter().map(EpochRecord::to_json).collect();
        assert!(lines[0].starts_with("{\"epoch\":0,\"split\":\"validation\""));
    }

    #[test]
    fn zero_patience_stops_after_first_stale_epoch() {
        let (_, data) = desk_data(200, 4);
        let init = RbmParams::init(6, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let cfg = TrainConfig {
            patience: 0,
            max_epochs: 20,
            lr: 1e-9,
            ..small_config()
        };
        let out = train(&init, &cfg, &data[..150], &data[150..], |_| {}).unwrap();
        let val: Vec<f64> = out.metrics.iter().filter(|r| r.split == Split::Validation).map(|r| r.nce).collect();
        let mut best = val[0];
        for (k, &x) in val.iter().enumerate().skip(1) {
            if x >= best {
                assert_eq!(k, val.len() - 1, "training continued after a stale epoch");
            }
            best = best.min(x);
        }
    }

    #[test]
    fn lr_grid_keeps_the_best_rate() {
        let (_, data) = desk_data(300, 6);
        let init = RbmParams::init(6, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let cfg = TrainConfig {
            lr_grid: vec![1e-6, 0.03],
            ..small_config()
        };
        let out = train(&init, &cfg, &data[..200], &data[200..], |_| {}).unwrap();
        assert_eq!(out.best.meta.lr, 0.03);
        assert!(out.metrics.iter().any(|r| r.lr == 1e-6));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            query: QuerySpec::Bernoulli { p_observe: 1.0 },
            ..small_config()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr_grid: vec![0.1, -1.0],
            ..small_config()
        };
        assert!(cfg.validate().is_err());
    }
}
