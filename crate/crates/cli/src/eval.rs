use anyhow::Result;
use clap::Args;
use qtnn_core::checkpoint::CheckpointMeta;
use qtnn_core::grid::{gmrf_forward, iou, predict_labels};
use qtnn_core::train::{evaluate, NetConfig, Trainable};
use qtnn_core::QuerySpec;
use rayon::prelude::*;
use serde_json::json;

use crate::models::{binary_rows, border_pairs, continuous_rows, Model};
use crate::settings::Settings;
use crate::Overrides;

pub const KEYS: &[&str] = &["checkpoint", "data", "query", "grid"];

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    /// Dataset to score, in the format the model trains on.
    #[arg(long)]
    data: Option<String>,
    /// `bernoulli:P`, `patch:HxW` or `fixed:0101...`.
    #[arg(long)]
    query: Option<String>,
    /// Image layout of the visible units for patch queries, if the checkpoint lacks one.
    #[arg(long)]
    grid: Option<String>,
}

impl Overrides for EvalArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("checkpoint", self.checkpoint.clone()),
            ("data", self.data.clone()),
            ("query", self.query.clone()),
            ("grid", self.grid.clone()),
        ]
    }
}

fn net_for(meta: &CheckpointMeta, s: &Settings) -> Result<NetConfig> {
    let mut net = NetConfig::from_meta(meta)?;
    if let Some(g) = s.dims("grid")? {
        net.grid = Some(g);
    }
    Ok(net)
}

fn score<P: Trainable>(params: &P, net: &NetConfig, spec: &QuerySpec, data: &[P::Sample], seed: u64) -> Result<(f64, usize, f64)> {
    let ce = evaluate(params, net, spec, data, seed)?;
    Ok((ce.nce()?, ce.n_predicted, ce.total_bits))
}

pub fn run(s: &Settings) -> Result<()> {
    let ckpt_path = s.input_path("checkpoint")?;
    let data_path = s.input_path("data")?;
    let spec: QuerySpec = s.get_or("query", QuerySpec::Bernoulli { p_observe: 0.5 })?;
    let seed = s.get_or("seed", 0u64)?;

    let model = Model::load(&ckpt_path)?;
    let mut mean_iou = None;
    let (kind, (nce, n_predicted, bits)) = match &model {
        Model::Rbm(c) => {
            let data = binary_rows(&data_path, Some(c.params.visible()))?;
            ("rbm", score(&c.params, &net_for(&c.meta, s)?, &spec, &data, seed)?)
        }
        Model::Dbm(c) => {
            let data = binary_rows(&data_path, Some(c.params.visible()))?;
            ("dbm", score(&c.params, &net_for(&c.meta, s)?, &spec, &data, seed)?)
        }
        Model::Grbm(c) => {
            let data = continuous_rows(&data_path, Some(c.params.visible()))?;
            ("grbm", score(&c.params, &net_for(&c.meta, s)?, &spec, &data, seed)?)
        }
        Model::Gmrf(c) => {
            let net = net_for(&c.meta, s)?;
            let data = border_pairs(&data_path)?;
            let ious = data
                .par_iter()
                .map(|p| -> Result<f64> {
                    let out = gmrf_forward(&c.params, &p.image, p.rows, p.cols, net.n_layers)?;
                    Ok(iou(&predict_labels(&out), &p.labels)?)
                })
                .collect::<Result<Vec<_>>>()?;
            mean_iou = Some(ious.iter().sum::<f64>() / ious.len().max(1) as f64);
            ("gmrf", score(&c.params, &net, &spec, &data, seed)?)
        }
    };
    match mean_iou {
        Some(m) => println!("{kind}: NCE {nce:.4} bits over {n_predicted} predictions, mean IOU {m:.4}"),
        None => println!("{kind}: NCE {nce:.4} bits over {n_predicted} predictions"),
    }
    let mut report = json!({
        "model": kind,
        "data": data_path.display().to_string(),
        "query": spec.to_string(),
        "seed": seed,
        "nce": nce,
        "total_bits": bits,
        "n_predicted": n_predicted,
    });
    if let Some(m) = mean_iou {
        report["iou"] = json!(m);
    }
    println!("{report}");
    Ok(())
}
