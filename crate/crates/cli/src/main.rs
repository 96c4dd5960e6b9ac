//! `qtnn`: generate data, train, evaluate and query belief-propagation networks.
//!
//! Exit codes: 0 on success, 1 on runtime or check failure, 2 on configuration errors.

mod check;
mod eval;
mod gen_data;
mod infer;
mod models;
mod settings;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{ConfigError, Settings};

#[derive(Parser)]
#[command(name = "qtnn", version, about = "Query-trained belief-propagation networks")]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-sample parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/validation/test datasets.
    GenData(gen_data::GenDataArgs),
    /// Train a network and write its best checkpoint and metrics stream.
    Train(train::TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(eval::EvalArgs),
    /// Answer queries for each row of an input file.
    Infer(infer::InferArgs),
    /// Run the built-in verification suites.
    Check(check::CheckArgs),
}

/// Copies the given flags into settings under their key names.
pub trait Overrides: Args {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)>;
}

fn settings_for(cli: &Cli, args: &impl Overrides, command: &str, allowed: &[&str]) -> Result<Settings, ConfigError> {
    let mut s = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    for (k, v) in args.overrides() {
        s.set(k, v);
    }
    s.set("seed", cli.seed.map(|x| x.to_string()));
    s.set("threads", cli.threads.map(|x| x.to_string()));
    s.restrict(command, allowed)?;
    if let Some(n) = s.get::<usize>("threads")? {
        if n == 0 {
            return settings::config_err("threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(s)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::GenData(a) => gen_data::run(&settings_for(cli, a, "gen-data", gen_data::KEYS)?).map(|_| true),
        Command::Train(a) => train::run(&settings_for(cli, a, "train", train::KEYS)?).map(|_| true),
        Command::Eval(a) => eval::run(&settings_for(cli, a, "eval", eval::KEYS)?).map(|_| true),
        Command::Infer(a) => infer::run(&settings_for(cli, a, "infer", infer::KEYS)?).map(|_| true),
        Command::Check(a) => check::run(&settings_for(cli, a, "check", check::KEYS)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
