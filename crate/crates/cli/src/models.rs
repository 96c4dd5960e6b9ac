//! Loading checkpoints and datasets for whichever model kind a file holds.

use std::path::Path;

use anyhow::{bail, Context, Result};
use qtnn_core::binary::{DbmParams, RbmParams};
use qtnn_core::checkpoint::{load_raw_checkpoint, Checkpoint};
use qtnn_core::datasets::{load_binary, load_border, load_continuous, BorderOwnershipPair};
use qtnn_core::gaussian::GrbmParams;
use qtnn_core::grid::GmrfParams;
use qtnn_core::ModelKind;

pub enum Model {
    Rbm(Checkpoint<RbmParams>),
    Dbm(Checkpoint<DbmParams>),
    Grbm(Checkpoint<GrbmParams>),
    Gmrf(Checkpoint<GmrfParams>),
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = load_raw_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Ok(match raw.kind {
            ModelKind::Rbm => Model::Rbm(Checkpoint::from_raw(raw)?),
            ModelKind::Dbm => Model::Dbm(Checkpoint::from_raw(raw)?),
            ModelKind::Grbm => Model::Grbm(Checkpoint::from_raw(raw)?),
            ModelKind::Gmrf => Model::Gmrf(Checkpoint::from_raw(raw)?),
        })
    }
}

pub fn binary_rows(path: &Path, n_vars: Option<usize>) -> Result<Vec<Vec<u8>>> {
    let data = load_binary(path)?;
    if let Some(n) = n_vars {
        if !data.is_empty() && data.n_vars != n {
            bail!("{} has {} variables per row, the model has {n}", path.display(), data.n_vars);
        }
    }
    Ok(data.rows)
}

pub fn continuous_rows(path: &Path, n_vars: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let m = load_continuous(path)?;
    if let Some(n) = n_vars {
        if m.rows() > 0 && m.cols() != n {
            bail!("{} has {} values per row, the model has {n}", path.display(), m.cols());
        }
    }
    Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
}

pub fn border_pairs(path: &Path) -> Result<Vec<BorderOwnershipPair>> {
    Ok(load_border(path)?)
}
