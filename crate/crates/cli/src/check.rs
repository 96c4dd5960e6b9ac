use anyhow::Result;
use clap::Args;
use qtnn_core::checks::{run_checks, CheckOptions, Scope};

use crate::settings::{ConfigError, Settings};
use crate::Overrides;

pub const KEYS: &[&str] = &["scope", "perturb"];

#[derive(Args)]
pub struct CheckArgs {
    /// all, kernels, rbm, dbm, grbm or gmrf.
    #[arg(long)]
    scope: Option<String>,
    /// Shift the weights the analytic gradient is taken at (negative control; gradient suites should fail).
    #[arg(long)]
    perturb: Option<String>,
}

impl Overrides for CheckArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![("scope", self.scope.clone()), ("perturb", self.perturb.clone())]
    }
}

/// Returns whether every suite passed.
pub fn run(s: &Settings) -> Result<bool> {
    let scope: Scope = s.get_or("scope", Scope::All)?;
    let perturb: f64 = s.get_or("perturb", 0.0)?;
    if !perturb.is_finite() {
        return Err(ConfigError("perturb must be finite".into()).into());
    }
    let opts = CheckOptions {
        seed: s.get_or("seed", 0u64)?,
        perturb,
    };
    let reports = run_checks(scope, &opts);
    for r in &reports {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("{status} {}/{}: {}", r.scope, r.name, r.detail);
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} suites, {failed} failed", reports.len());
    Ok(failed == 0)
}
