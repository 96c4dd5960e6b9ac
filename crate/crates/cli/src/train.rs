use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use qtnn_core::binary::{tau_for_temperature, DbmParams, RbmParams};
use qtnn_core::checkpoint::save_checkpoint;
use qtnn_core::gaussian::GrbmParams;
use qtnn_core::grid::{estimate_noise, GmrfParams};
use qtnn_core::train::{self as core_train, NetConfig, TrainConfig, Trainable};
use qtnn_core::{ModelKind, QuerySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{binary_rows, border_pairs, continuous_rows};
use crate::settings::{config_err, ConfigError, Settings};
use crate::Overrides;

const INIT_SEED_SALT: u64 = 0x1a17_0000_0000_0001;

pub const KEYS: &[&str] = &[
    "model",
    "train",
    "validation",
    "out",
    "hidden",
    "hidden2",
    "n_clones",
    "layers",
    "epsilon",
    "grid",
    "lr",
    "lr_grid",
    "batch_size",
    "epochs",
    "patience",
    "query",
    "wall_clock",
    "temperature",
];

#[derive(Args)]
pub struct TrainArgs {
    /// rbm, dbm, grbm or gmrf.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    validation: Option<String>,
    /// Output directory for checkpoint.qtbp and metrics.jsonl.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    /// Second hidden layer width (DBM).
    #[arg(long)]
    hidden2: Option<String>,
    #[arg(long)]
    n_clones: Option<String>,
    /// Number of unrolled BP layers.
    #[arg(long)]
    layers: Option<String>,
    /// Evidence variance for GRBM inputs.
    #[arg(long)]
    epsilon: Option<String>,
    /// Image layout of the visible units, e.g. `12x12` (needed for patch queries).
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Comma-separated learning rates; the best on validation is kept.
    #[arg(long)]
    lr_grid: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    /// `bernoulli:P`, `patch:HxW` or `fixed:0101...`.
    #[arg(long)]
    query: Option<String>,
    /// Record elapsed milliseconds in metrics (`false` makes the stream reproducible).
    #[arg(long)]
    wall_clock: Option<String>,
    /// Initial temperature for binary models.
    #[arg(long)]
    temperature: Option<String>,
}

impl Overrides for TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("model", self.model.clone()),
            ("train", self.train.clone()),
            ("validation", self.validation.clone()),
            ("out", self.out.clone()),
            ("hidden", self.hidden.clone()),
            ("hidden2", self.hidden2.clone()),
            ("n_clones", self.n_clones.clone()),
            ("layers", self.layers.clone()),
            ("epsilon", self.epsilon.clone()),
            ("grid", self.grid.clone()),
            ("lr", self.lr.clone()),
            ("lr_grid", self.lr_grid.clone()),
            ("batch_size", self.batch_size.clone()),
            ("epochs", self.epochs.clone()),
            ("patience", self.patience.clone()),
            ("query", self.query.clone()),
            ("wall_clock", self.wall_clock.clone()),
            ("temperature", self.temperature.clone()),
        ]
    }
}

fn default_layers(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Rbm | ModelKind::Dbm => 10,
        ModelKind::Grbm => 50,
        ModelKind::Gmrf => 15,
    }
}

fn train_config(s: &Settings, kind: ModelKind) -> Result<TrainConfig, ConfigError> {
    let defaults = NetConfig::new(default_layers(kind));
    let net = NetConfig {
        n_layers: s.get_or("layers", defaults.n_layers)?,
        epsilon: s.get_or("epsilon", defaults.epsilon)?,
        grid: s.dims("grid")?,
    };
    if !(net.epsilon > 0.0) {
        return config_err("epsilon must be positive");
    }
    // grid-model queries always cover the whole label grid
    let query: QuerySpec = match kind {
        ModelKind::Gmrf => QuerySpec::Bernoulli { p_observe: 0.0 },
        _ => s.get_or("query", QuerySpec::Bernoulli { p_observe: 0.5 })?,
    };
    let base = TrainConfig::new(net, query);
    let cfg = TrainConfig {
        lr: s.get_or("lr", base.lr)?,
        lr_grid: s.list("lr_grid")?.unwrap_or_default(),
        batch_size: s.get_or("batch_size", base.batch_size)?,
        max_epochs: s.get_or("epochs", base.max_epochs)?,
        patience: s.get_or("patience", base.patience)?,
        seed: s.get_or("seed", base.seed)?,
        wall_clock: s.get_or("wall_clock", base.wall_clock)?,
        ..base
    };
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn positive(s: &Settings, key: &str, default: usize) -> Result<usize, ConfigError> {
    let v = s.get_or(key, default)?;
    if v == 0 {
        return config_err(format!("`{key}` must be positive"));
    }
    Ok(v)
}

fn fit<P: Trainable>(init: P, cfg: &TrainConfig, train_set: &[P::Sample], val_set: &[P::Sample], out: &PathBuf) -> Result<()> {
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut write_err = None;
    let outcome = core_train::train(&init, cfg, train_set, val_set, |r| {
        if let Err(e) = writeln!(metrics, "{}", r.to_json()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    metrics.flush()?;
    let outcome = outcome?;
    for (lr, epoch) in &outcome.diverged {
        eprintln!("lr {lr} diverged at epoch {epoch}");
    }
    let ckpt_path = out.join("checkpoint.qtbp");
    save_checkpoint(&ckpt_path, &outcome.best)?;
    println!(
        "validation NCE {:.4} bits (lr {}, epoch {}); wrote {}",
        outcome.best.meta.best_val_nce,
        outcome.best.meta.lr,
        outcome.best.meta.epoch,
        ckpt_path.display()
    );
    Ok(())
}

pub fn run(s: &Settings) -> Result<()> {
    let kind: ModelKind = s.require("model")?;
    let train_path = s.input_path("train")?;
    let val_path = s.input_path("validation")?;
    let out: PathBuf = s.require("out")?;
    let cfg = train_config(s, kind)?;
    let temperature = match s.get::<f64>("temperature")? {
        Some(t) if kind == ModelKind::Gmrf && t != 1.0 => return Err(ConfigError("the grid model runs at a fixed temperature of 1".into()).into()),
        Some(t) => Some(tau_for_temperature(t).map_err(|e| ConfigError(e.to_string()))?),
        None => None,
    };
    let hidden = positive(s, "hidden", 16)?;
    let hidden2 = positive(s, "hidden2", 8)?;
    let n_clones = positive(s, "n_clones", 8)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    // initialization draws from its own stream, separate from the shuffling seed
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SEED_SALT);
    match kind {
        ModelKind::Rbm => {
            let tr = binary_rows(&train_path, None)?;
            let v = tr.first().map_or(0, Vec::len);
            let va = binary_rows(&val_path, Some(v))?;
            let mut init = RbmParams::init(v, hidden, &mut rng);
            if let Some(tau) = temperature {
                init.tau = tau;
            }
            fit(init, &cfg, &tr, &va, &out)
        }
        ModelKind::Dbm => {
            let tr = binary_rows(&train_path, None)?;
            let v = tr.first().map_or(0, Vec::len);
            let va = binary_rows(&val_path, Some(v))?;
            let mut init = DbmParams::init(v, hidden, hidden2, &mut rng);
            if let Some(tau) = temperature {
                init.tau = tau;
            }
            fit(init, &cfg, &tr, &va, &out)
        }
        ModelKind::Grbm => {
            let tr = continuous_rows(&train_path, None)?;
            let v = tr.first().map_or(0, Vec::len);
            let va = continuous_rows(&val_path, Some(v))?;
            let n = tr.len().max(1) as f64;
            let mean = (0..v).map(|j| tr.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            fit(GrbmParams::init(hidden, mean, &mut rng), &cfg, &tr, &va, &out)
        }
        ModelKind::Gmrf => {
            let tr = border_pairs(&train_path)?;
            let va = border_pairs(&val_path)?;
            let init = GmrfParams::init(n_clones, estimate_noise(&tr)?, &mut rng);
            fit(init, &cfg, &tr, &va, &out)
        }
    }
}
