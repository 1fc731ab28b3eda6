use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use moco_core::problems::Problem;
use moco_core::training::TrainConfig;
use serde::de::DeserializeOwned;

use moco::commands::{self, EvalConfig, GenConfig, WeightsConfig};
use moco::formats::{read_json, to_json_pretty};
use moco::gradcheck::{render_table, GradcheckConfig};
use moco::{MocoError, Result};

/// Decomposition-based neural multi-objective combinatorial optimization.
#[derive(Debug, Parser)]
#[command(name = "moco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate random instances as JSON lines.
    Gen(GenArgs),
    /// Write a simplex-lattice weight set as CSV.
    Weights(WeightsArgs),
    /// Train a policy from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and report hypervolume.
    Eval(EvalArgs),
    /// Run the gradient checks and print a pass/fail table.
    Gradcheck(GradcheckArgs),
    /// Compare gradient variance of both training algorithms.
    Variance(VarianceArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    problem: Option<Problem>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Debug, Args)]
struct WeightsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kappa: Option<usize>,
    /// Lattice resolution.
    #[arg(long = "h")]
    h: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Reference normalized HV for the gap column.
    #[arg(long)]
    hv_ref: Option<f64>,
    #[arg(long, action = ArgAction::Set)]
    augment: Option<bool>,
    /// Insert every augmented solution into the archive.
    #[arg(long, action = ArgAction::Set)]
    pool: Option<bool>,
    /// Write per-instance fronts.
    #[arg(long, action = ArgAction::Set)]
    fronts: Option<bool>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// MOTSP size of the end-to-end checks.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Corrupt the analytic gradients to exercise the failure path.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct VarianceArgs {
    #[command(flatten)]
    common: Common,
    /// Number of batches per algorithm.
    #[arg(long)]
    batches: Option<usize>,
}

fn load_or<T: DeserializeOwned>(config: &Option<PathBuf>, fallback: impl FnOnce() -> Result<T>) -> Result<T> {
    match config {
        Some(p) => read_json(p),
        None => fallback(),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| MocoError::Usage(format!("--{flag} is required without --config")))
}

fn print_path(p: &Path) {
    println!("{}", p.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let mut cfg = load_or(&a.common.config, || {
                Ok(GenConfig {
                    problem: required(a.problem, "problem")?,
                    n: required(a.n, "n")?,
                    kappa: required(a.kappa, "kappa")?,
                    count: required(a.count, "count")?,
                    seed: a.common.seed.unwrap_or(0),
                })
            })?;
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            cfg.problem = a.problem.unwrap_or(cfg.problem);
            cfg.n = a.n.unwrap_or(cfg.n);
            cfg.kappa = a.kappa.unwrap_or(cfg.kappa);
            cfg.count = a.count.unwrap_or(cfg.count);
            print_path(&commands::cmd_gen(&cfg, &a.common.out)?);
        }
        Command::Weights(a) => {
            let mut cfg = load_or(&a.config, || {
                Ok(WeightsConfig { kappa: required(a.kappa, "kappa")?, h: required(a.h, "h")? })
            })?;
            cfg.kappa = a.kappa.unwrap_or(cfg.kappa);
            cfg.h = a.h.unwrap_or(cfg.h);
            print_path(&commands::cmd_weights(&cfg, &a.out)?);
        }
        Command::Train(a) => {
            let path = required(a.common.config.clone(), "config")?;
            let mut cfg: TrainConfig = read_json(&path)?;
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            let outcome = commands::cmd_train(&cfg, &a.common.out, !a.quiet)?;
            if let Some(hv) = outcome.records.iter().rev().find_map(|r| r.validation_hv) {
                println!("final validation hv {hv:.6}");
            }
            print_path(&outcome.checkpoint);
        }
        Command::Eval(a) => {
            let mut cfg = load_or(&a.config, || {
                Ok(EvalConfig {
                    checkpoint: required(a.checkpoint.clone(), "checkpoint")?,
                    dataset: required(a.dataset.clone(), "dataset")?,
                    weights: required(a.weights.clone(), "weights")?,
                    frame: None,
                    hv_ref: None,
                    augment: false,
                    pool: false,
                    fronts: false,
                    scalarization: None,
                })
            })?;
            cfg.checkpoint = a.checkpoint.unwrap_or(cfg.checkpoint);
            cfg.dataset = a.dataset.unwrap_or(cfg.dataset);
            cfg.weights = a.weights.unwrap_or(cfg.weights);
            cfg.hv_ref = a.hv_ref.or(cfg.hv_ref);
            cfg.augment = a.augment.unwrap_or(cfg.augment);
            cfg.pool = a.pool.unwrap_or(cfg.pool);
            cfg.fronts = a.fronts.unwrap_or(cfg.fronts);
            let outcome = commands::cmd_eval(&cfg, &a.out, a.threads)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", to_json_pretty(&outcome.json));
        }
        Command::Gradcheck(a) => {
            let mut cfg = load_or(&a.config, || Ok(GradcheckConfig::default()))?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.scale = a.scale.unwrap_or(cfg.scale);
            cfg.pairs = a.pairs.unwrap_or(cfg.pairs);
            cfg.inject_fault |= a.inject_fault;
            let rows = commands::cmd_gradcheck(&cfg, a.out.as_deref())?;
            print!("{}", render_table(&rows));
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(MocoError::CheckFailed(failed.join(", ")));
            }
        }
        Command::Variance(a) => {
            let path = required(a.common.config.clone(), "config")?;
            let mut cfg: TrainConfig = read_json(&path)?;
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            if let Some(b) = a.batches {
                cfg.variance_batches = b;
            }
            let log = commands::cmd_variance(&cfg, &a.common.out)?;
            for pair in log.chunks(2) {
                if let [pl, rl] = pair {
                    println!("batch {}  PL {:.6e}  REINFORCE {:.6e}", pl.batch, pl.variance, rl.variance);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
