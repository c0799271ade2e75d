//! `omnidistill`: data generation, expert buffers, distillation, evaluation and
//! verification of the theory, each writing into its own run directory.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error, 3 verification failure.

mod commands;
mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{EvalSource, Suite};
use crate::config::{RunConfig, SEED_ENV};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "omnidistill", version, about = "Omnimodal dataset distillation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory for the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the config seed and the OMNIDISTILL_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Single `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test embedding datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train expert trajectories on real data.
    Buffer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Method whose inner objective the experts train with.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        num_experts: Option<usize>,
    },
    /// Distill a synthetic set by trajectory matching.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        buffer: PathBuf,
        /// hopa, 3pair, tbind, vbind, rank2, ablate-LM, ablate-wBCE or ablate-mining.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train fresh students and report cross-modal recall on test data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test: PathBuf,
        /// Synthetic set to train on.
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        artifact: Option<PathBuf>,
        /// Baseline to evaluate instead of a synthetic set.
        #[arg(long, value_parser = ["random"], requires = "train")]
        baseline: Option<String>,
        /// Training data the random coreset is drawn from.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Coreset size.
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated evaluation seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Method whose inner objective trains students on the synthetic set.
        #[arg(long)]
        method: Option<String>,
    },
    /// Run numerical verification suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.set_pair(o)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.resolve_seed(common.seed, std::env::var(SEED_ENV).ok())?;
    Ok(cfg)
}

fn out(common: &Common) -> &Path {
    &common.out
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&resolve(&common, &[])?, out(&common)),
        Command::Buffer {
            common,
            data,
            method,
            num_experts,
        } => {
            let cfg = resolve(&common, &[("method", method), ("num_experts", num_experts.map(|n| n.to_string()))])?;
            commands::buffer(&cfg, &data, out(&common))
        }
        Command::Distill {
            common,
            data,
            buffer,
            method,
        } => {
            let cfg = resolve(&common, &[("method", method)])?;
            cfg.method()?;
            commands::distill_cmd(&cfg, &data, &buffer, out(&common))
        }
        Command::Eval {
            common,
            test,
            artifact,
            baseline,
            train,
            n,
            seeds,
            method,
        } => {
            let cfg = resolve(
                &common,
                &[("n", n.map(|v| v.to_string())), ("seeds", seeds), ("method", method)],
            )?;
            let source = match (&artifact, &baseline, &train) {
                (Some(a), None, _) => EvalSource::Synthetic(a),
                (None, Some(_), Some(t)) => EvalSource::RandomCoreset { train: t },
                _ => return Err(CliError::Usage("eval needs --artifact or --baseline random --train".into())),
            };
            commands::eval(&cfg, source, &test, out(&common))
        }
        Command::Verify { common, suite, trials } => {
            let cfg = resolve(&common, &[("trials", trials.map(|t| t.to_string()))])?;
            commands::verify(&cfg, suite, out(&common))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
