//! `flexsel`: reproducible experiment driver for query-aware token selection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::Run;
use crate::config::{RunConfig, ScorerKind};

#[derive(Debug, Parser)]
#[command(
    name = "flexsel",
    version,
    about = "Query-aware visual token selection experiments"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "flexsel-out")]
    out: PathBuf,
    /// Report errors as a JSON object on standard error.
    #[arg(long, global = true)]
    json_errors: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate planted haystacks with their teacher scores.
    Gen,
    /// Per-layer Recall@K profile and reference layer.
    Profile,
    /// Select tokens from one haystack.
    Select {
        /// Score with a trained selector instead of the planted oracle.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
        /// Also write median stage timings to timing.json.
        #[arg(long)]
        timing: bool,
    },
    /// Train the lightweight selector against the planted teacher.
    Train,
    /// Compare a trained selector with the teacher and the training-free pipeline.
    Eval {
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
    /// Analytical prefill cost report.
    Flops,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FLEXSEL_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("FLEXSEL_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    match &cli.command {
        Command::Select {
            weights: Some(w), ..
        } => {
            cfg.select.scorer = ScorerKind::Selector;
            cfg.select.weights = Some(w.clone());
        }
        Command::Eval { weights: Some(w) } => cfg.eval.weights = Some(w.clone()),
        _ => {}
    }
    let run = Run::create(cfg.resolve(cli.global.seed), &cli.global.out)?;
    let summary = match cli.command {
        Command::Gen => {
            commands::gen(&run)?;
            None
        }
        Command::Profile => Some(commands::profile(&run)?),
        Command::Select { timing, .. } => Some(commands::select(&run, timing)?),
        Command::Train => Some(commands::train_cmd(&run)?),
        Command::Eval { .. } => Some(commands::eval(&run)?),
        Command::Flops => Some(commands::flops(&run)?),
    };
    if let Some(s) = summary {
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(())
}

fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<flexsel_core::Error>() {
            return e.code();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "config";
        }
    }
    "runtime"
}

fn report(json: bool, code: &str, message: &str) {
    if json {
        let doc = serde_json::json!({ "error": { "code": code, "message": message } });
        eprintln!("{doc}");
    } else {
        eprintln!("error: {message}");
    }
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report(true, "usage", e.to_string().trim());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report(json_errors, error_code(&err), &format!("{err:#}"));
            ExitCode::FAILURE
        }
    }
}
