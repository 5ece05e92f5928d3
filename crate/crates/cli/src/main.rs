//! `ldr`: dataset generation, training, annealing, refinement, evaluation and
//! reporting for flow samplers trained with log-density regression.
//!
//! Exit codes: 0 success, 1 training or evaluation failure, 2 configuration
//! or input error.

mod commands;
mod config;
mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use ldr::metrics::EvalConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{AnnealRun, DemoRun, RefineRun, Seeded, TrainRun, Validate, SEED_ENV};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::failure(format!("{}: {e}", path.display()))
    }
}

impl From<ldr::Error> for CliError {
    fn from(e: ldr::Error) -> Self {
        use ldr::Error as E;
        match e {
            E::Config(_) | E::Format(_) | E::Json(_) | E::DimensionMismatch { .. } => Self::config(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "ldr", version, about = "Flow samplers trained with log-density regression")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Options shared by the config-driven commands.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, required_unless_present = "print_default_config")]
    config: Option<PathBuf>,
    /// Run directory (with `--seeds`, one `seed-<s>` subdirectory per seed).
    #[arg(long, required_unless_present_any = ["print_default_config", "check"])]
    out: Option<PathBuf>,
    /// Comma-separated seeds; each runs in its own process with the seed override.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Number of seed processes run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print the default configuration and exit.
    #[arg(long)]
    print_default_config: bool,
    /// Validate the configuration and exit.
    #[arg(long, conflicts_with = "out")]
    check: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a labeled dataset (CSV `x1..xd,energy` plus a JSON sidecar).
    Dataset {
        #[arg(long)]
        target: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mixture weights for `-biased` targets.
        #[arg(long, value_delimiter = ',')]
        bias_weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a labeled dataset.
    Train(RunArgs),
    /// Data-free training by trust-region annealing.
    Anneal(RunArgs),
    /// Two-stage training from a biased dataset.
    Refine(RunArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "gmm2")]
        target: String,
        #[arg(long, default_value_t = EvalConfig::default().n_eval)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[arg(long, default_value_t = EvalConfig::default().bins)]
        bins: usize,
        #[arg(long, default_value_t = EvalConfig::default().clip_fraction)]
        clip_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pure log-density regression on a dataset restricted to some modes.
    DemoLdrOnly(RunArgs),
    /// Aggregate run directories into a Markdown table.
    Report {
        /// Run directories, or parents containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_default<C: Serialize + Default>() -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&C::default()).map_err(|e| CliError::failure(e.to_string()))?;
    println!("{text}");
    Ok(())
}

/// Re-invokes this binary once per seed, `jobs` at a time.
fn fan_out(sub: &str, config: &Path, out: &Path, seeds: &[u64], jobs: usize) -> Result<(), CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::failure(e.to_string()))?;
    let mut failed = Vec::new();
    for chunk in seeds.chunks(jobs.max(1)) {
        let mut children = Vec::new();
        for &s in chunk {
            let dir = out.join(format!("seed-{s}"));
            let child = Command::new(&exe)
                .arg(sub)
                .arg("--config")
                .arg(config)
                .arg("--out")
                .arg(&dir)
                .env(SEED_ENV, s.to_string())
                .spawn()
                .map_err(|e| CliError::failure(format!("cannot start seed {s}: {e}")))?;
            children.push((s, child));
        }
        for (s, mut child) in children {
            let status = child.wait().map_err(|e| CliError::failure(e.to_string()))?;
            if !status.success() {
                failed.push((s, status.code().unwrap_or(1)));
            }
        }
    }
    match failed.iter().map(|&(_, c)| c).max() {
        None => Ok(()),
        Some(code) => Err(CliError {
            code: code.clamp(1, 255) as u8,
            message: format!("failed seeds: {failed:?}"),
        }),
    }
}

fn run_cmd<C, F>(sub: &str, args: RunArgs, body: F) -> Result<(), CliError>
where
    C: Serialize + Default + DeserializeOwned + Seeded + Validate,
    F: FnOnce(&Path, &Path) -> Result<(), CliError>,
{
    if args.print_default_config {
        return print_default::<C>();
    }
    let config = args.config.unwrap();
    if args.check {
        let (cfg, _) = config::load::<C>(&config)?;
        return cfg.validate();
    }
    let out = args.out.unwrap();
    if args.seeds.is_empty() {
        body(&config, &out)
    } else {
        fan_out(sub, &config, &out, &args.seeds, args.jobs)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Dataset {
            target,
            n,
            seed,
            bias_weights,
            out,
        } => commands::cmd_dataset(commands::DatasetArgs {
            target,
            n,
            seed,
            bias_weights,
            out,
        }),
        Cmd::Train(a) => run_cmd::<TrainRun, _>("train", a, commands::cmd_train),
        Cmd::Anneal(a) => run_cmd::<AnnealRun, _>("anneal", a, commands::cmd_anneal),
        Cmd::Refine(a) => run_cmd::<RefineRun, _>("refine", a, commands::cmd_refine),
        Cmd::DemoLdrOnly(a) => run_cmd::<DemoRun, _>("demo-ldr-only", a, commands::cmd_demo_ldr_only),
        Cmd::Eval {
            checkpoint,
            target,
            n_eval,
            eval_seed,
            bins,
            clip_fraction,
            out,
        } => {
            let eval = EvalConfig {
                n_eval,
                seed: eval_seed,
                bins,
                clip_fraction,
            };
            commands::cmd_eval(&checkpoint, &target, eval, &out)
        }
        Cmd::Report { runs, out } => report::cmd_report(&runs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
