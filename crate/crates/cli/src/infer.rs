use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use qtnn_core::binary::{dbm_forward_bits, rbm_forward_bits};
use qtnn_core::datasets::load_binary;
use qtnn_core::gaussian::{grbm_forward, GrbmConfig};
use qtnn_core::grid::{aggregate_labels, gmrf_forward};
use qtnn_core::train::NetConfig;
use qtnn_core::QueryMask;
use rayon::prelude::*;

use crate::models::{binary_rows, continuous_rows, Model};
use crate::settings::{ConfigError, Settings};
use crate::Overrides;

pub const KEYS: &[&str] = &["checkpoint", "input", "mask", "output"];

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    /// Samples (binary rows, comma-separated reals, or one image grid for the grid model).
    #[arg(long)]
    input: Option<String>,
    /// Binary rows marking evidence with 1 and targets with 0; one row applies to every sample.
    #[arg(long)]
    mask: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    output: Option<String>,
}

impl Overrides for InferArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("checkpoint", self.checkpoint.clone()),
            ("input", self.input.clone()),
            ("mask", self.mask.clone()),
            ("output", self.output.clone()),
        ]
    }
}

/// One mask per sample, broadcasting a single row.
fn masks(path: &Path, n_samples: usize, n_vars: usize) -> Result<Vec<QueryMask>> {
    let rows = binary_rows(path, Some(n_vars))?;
    let rows = match rows.len() {
        1 => vec![rows[0].clone(); n_samples],
        n if n == n_samples => rows,
        n => bail!("{} holds {n} masks for {n_samples} samples", path.display()),
    };
    rows.iter().map(|r| Ok(QueryMask::from_bits(r)?)).collect()
}

fn join(values: impl Iterator<Item = String>, sep: &str) -> String {
    values.collect::<Vec<_>>().join(sep)
}

pub fn run(s: &Settings) -> Result<()> {
    let ckpt_path = s.input_path("checkpoint")?;
    let input = s.input_path("input")?;
    let output: Option<PathBuf> = s.get("output")?;
    let model = Model::load(&ckpt_path)?;
    let mask_path = match (&model, s.get::<PathBuf>("mask")?) {
        (Model::Gmrf(_), _) => None,
        (_, None) => return Err(ConfigError("missing required key `mask`".into()).into()),
        (_, Some(_)) => Some(s.input_path("mask")?),
    };

    let mut text = String::new();
    match &model {
        Model::Rbm(c) => {
            let net = NetConfig::from_meta(&c.meta)?;
            let data = binary_rows(&input, Some(c.params.visible()))?;
            let qs = masks(mask_path.as_deref().unwrap(), data.len(), c.params.visible())?;
            let rows = data
                .par_iter()
                .zip(&qs)
                .map(|(v, q)| Ok(rbm_forward_bits(&c.params, v, q, net.n_layers)?.v_hat))
                .collect::<Result<Vec<_>>>()?;
            for r in rows {
                writeln!(text, "{}", join(r.iter().map(|p| format!("{p:.6}")), " "))?;
            }
        }
        Model::Dbm(c) => {
            let net = NetConfig::from_meta(&c.meta)?;
            let data = binary_rows(&input, Some(c.params.visible()))?;
            let qs = masks(mask_path.as_deref().unwrap(), data.len(), c.params.visible())?;
            let rows = data
                .par_iter()
                .zip(&qs)
                .map(|(v, q)| Ok(dbm_forward_bits(&c.params, v, q, net.n_layers)?.v_hat))
                .collect::<Result<Vec<_>>>()?;
            for r in rows {
                writeln!(text, "{}", join(r.iter().map(|p| format!("{p:.6}")), " "))?;
            }
        }
        Model::Grbm(c) => {
            let net = NetConfig::from_meta(&c.meta)?;
            let cfg = GrbmConfig::new(net.epsilon, net.n_layers)?;
            let data = continuous_rows(&input, Some(c.params.visible()))?;
            let qs = masks(mask_path.as_deref().unwrap(), data.len(), c.params.visible())?;
            let rows = data
                .par_iter()
                .zip(&qs)
                .map(|(v, q)| {
                    let out = grbm_forward(&c.params, v, q, &cfg)?;
                    Ok(out.mean.iter().zip(&out.var).map(|(m, v)| format!("{m:.6},{v:.6}")).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            for r in rows {
                writeln!(text, "{}", r.join(","))?;
            }
        }
        Model::Gmrf(c) => {
            let net = NetConfig::from_meta(&c.meta)?;
            let image = load_binary(&input)?;
            let (rows, cols) = (image.len(), image.n_vars);
            if rows == 0 {
                bail!("{} holds no image rows", input.display());
            }
            let pixels: Vec<u8> = image.rows.concat();
            let out = gmrf_forward(&c.params, &pixels, rows, cols, net.n_layers)?;
            let probs = aggregate_labels(&out.beliefs, c.params.n_states())?;
            for r in 0..rows {
                let line = join((0..cols).map(|col| probs[r * cols + col].argmax().code().to_string()), " ");
                writeln!(text, "{line}")?;
            }
            writeln!(text)?;
            for p in &probs {
                writeln!(text, "{}", join(p.by_code().iter().map(|x| format!("{x:.6}")), " "))?;
            }
        }
    }
    match output {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
