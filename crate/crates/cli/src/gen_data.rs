use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use qtnn_core::binary::RbmParams;
use qtnn_core::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use qtnn_core::datasets::{border_to_text, continuous_to_text, gen_border_ownership, gen_textures, split, BinaryDataset, BorderConfig, ShapeKind};
use qtnn_core::oracle::{exact_sample, EnumerablePgm};
use qtnn_core::train::NetConfig;
use qtnn_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::settings::{config_err, ConfigError, Settings};
use crate::Overrides;

pub const KEYS: &[&str] = &["kind", "n", "size", "shape", "p_drop", "spurious", "spur_len", "visible", "hidden", "out", "split"];

#[derive(Args)]
pub struct GenDataArgs {
    /// border, rbm or texture.
    #[arg(long)]
    kind: Option<String>,
    /// Total number of samples across all splits.
    #[arg(long)]
    n: Option<String>,
    /// Grid side length for border and texture data.
    #[arg(long)]
    size: Option<String>,
    /// rectangle or ellipse.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    p_drop: Option<String>,
    #[arg(long)]
    spurious: Option<String>,
    #[arg(long)]
    spur_len: Option<String>,
    #[arg(long)]
    visible: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Train, validation and test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long)]
    split: Option<String>,
}

impl Overrides for GenDataArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("kind", self.kind.clone()),
            ("n", self.n.clone()),
            ("size", self.size.clone()),
            ("shape", self.shape.clone()),
            ("p_drop", self.p_drop.clone()),
            ("spurious", self.spurious.clone()),
            ("spur_len", self.spur_len.clone()),
            ("visible", self.visible.clone()),
            ("hidden", self.hidden.clone()),
            ("out", self.out.clone()),
            ("split", self.split.clone()),
        ]
    }
}

enum Plan {
    Border(BorderConfig),
    Rbm { visible: usize, hidden: usize },
    Texture { size: usize },
}

fn plan(s: &Settings) -> Result<Plan, ConfigError> {
    let kind: String = s.require("kind")?;
    match kind.as_str() {
        "border" => {
            let size = s.get_or("size", 12usize)?;
            let shape: ShapeKind = s.get_or("shape", ShapeKind::Rectangle)?;
            let defaults = BorderConfig::new(size, size, shape);
            let cfg = BorderConfig {
                p_drop: s.get_or("p_drop", defaults.p_drop)?,
                n_spurious: s.get_or("spurious", defaults.n_spurious)?,
                spur_len: s.get_or("spur_len", defaults.spur_len)?,
                ..defaults
            };
            cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
            Ok(Plan::Border(cfg))
        }
        "rbm" => {
            let visible = s.get_or("visible", 10usize)?;
            let hidden = s.get_or("hidden", 5usize)?;
            if visible == 0 || hidden == 0 {
                return config_err("visible and hidden must be positive");
            }
            if visible + hidden > 20 {
                return config_err("exact sampling enumerates every state: keep visible + hidden <= 20");
            }
            Ok(Plan::Rbm { visible, hidden })
        }
        "texture" => {
            let size = s.get_or("size", 12usize)?;
            if size == 0 {
                return config_err("size must be positive");
            }
            Ok(Plan::Texture { size })
        }
        other => config_err(format!("unknown data kind `{other}` (expected border, rbm or texture)")),
    }
}

fn fractions(s: &Settings) -> Result<(f64, f64, f64), ConfigError> {
    match s.list::<f64>("split")?.as_deref() {
        None => Ok((0.8, 0.1, 0.1)),
        Some(&[a, b, c]) if [a, b, c].iter().all(|f| (0.0..=1.0).contains(f)) && (a + b + c - 1.0).abs() < 1e-9 => Ok((a, b, c)),
        Some(_) => config_err("split needs three fractions in [0, 1] summing to 1"),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Per-column mean and standard deviation.
fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    (mean, std)
}

fn standardized(rows: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Result<Matrix> {
    let d = mean.len();
    let data = rows.iter().flat_map(|r| (0..d).map(move |j| (r[j] - mean[j]) / std[j])).collect();
    Ok(Matrix::from_vec(rows.len(), d, data)?)
}

pub fn run(s: &Settings) -> Result<()> {
    let plan = plan(s)?;
    let n: usize = s.require("n")?;
    if n == 0 {
        return Err(ConfigError("n must be positive".into()).into());
    }
    let seed = s.get_or("seed", 0u64)?;
    let fracs = fractions(s)?;
    let out: PathBuf = s.require("out")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the split gets its own stream so sample content does not depend on it
    let split_seed = rng.random();
    let names = ["train.txt", "validation.txt", "test.txt"];
    let mut files = Vec::new();
    let kind;
    let counts;
    match plan {
        Plan::Border(cfg) => {
            kind = "border";
            let pairs = gen_border_ownership(n, &cfg, &mut rng)?;
            let (a, b, c) = split(&pairs, fracs, split_seed)?;
            counts = [a.len(), b.len(), c.len()];
            for (name, part) in names.iter().zip([a, b, c]) {
                files.push(write(&out, name, &border_to_text(&part))?);
            }
        }
        Plan::Rbm { visible, hidden } => {
            kind = "rbm";
            let uniform = |rng: &mut ChaCha8Rng, len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let w = Matrix::from_vec(hidden, visible, uniform(&mut rng, hidden * visible))?;
            let (c_v, c_h) = (uniform(&mut rng, visible), uniform(&mut rng, hidden));
            let truth = RbmParams::with_temperature(w, c_v, c_h, 1.0)?;
            let rows: Vec<Vec<u8>> = exact_sample(&EnumerablePgm::rbm(&truth)?, n, &mut rng)?
                .into_iter()
                .map(|x| x[..visible].iter().map(|&b| b as u8).collect())
                .collect();
            let (a, b, c) = split(&rows, fracs, split_seed)?;
            counts = [a.len(), b.len(), c.len()];
            for (name, part) in names.iter().zip([a, b, c]) {
                files.push(write(&out, name, &BinaryDataset::new(visible, part)?.to_text())?);
            }
            let truth_path = out.join("truth.qtbp");
            let meta = CheckpointMeta {
                epoch: 0,
                best_val_nce: f64::NAN,
                seed,
                lr: 0.0,
                hyper: NetConfig::new(10).to_hyper(),
            };
            save_checkpoint(&truth_path, &Checkpoint { params: truth, meta })?;
            files.push(truth_path);
        }
        Plan::Texture { size } => {
            kind = "texture";
            let raw = gen_textures(n, size, &mut rng)?;
            let rows: Vec<Vec<f64>> = (0..raw.rows()).map(|r| raw.row(r).to_vec()).collect();
            let (a, b, c) = split(&rows, fracs, split_seed)?;
            counts = [a.len(), b.len(), c.len()];
            // every split is standardized with training moments
            let (mean, std) = moments(&a);
            for (name, part) in names.iter().zip([a, b, c]) {
                let name = name.replace(".txt", ".csv");
                files.push(write(&out, &name, &continuous_to_text(&standardized(&part, &mean, &std)?))?);
            }
        }
    }
    let manifest = json!({
        "kind": kind,
        "seed": seed,
        "n": n,
        "counts": { "train": counts[0], "validation": counts[1], "test": counts[2] },
        "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    println!("{manifest}");
    Ok(())
}
