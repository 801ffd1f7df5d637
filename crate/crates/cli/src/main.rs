//! `ica-lab`: data generation, support checks, training, evaluation,
//! oracle scans and reproduction tables.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{exit_code, Context};
use config::{Figure, RunConfig};

#[derive(Parser)]
#[command(name = "ica-lab", version, about = "Nonlinear ICA under structural sparsity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Smaller trial, seed and epoch counts.
    #[arg(long, global = true)]
    fast: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and audit its assumptions.
    Gen,
    /// Structural-sparsity report for a support matrix.
    CheckSupport {
        /// Inline support, rows separated by `;`, e.g. `1,0;1,1`.
        #[arg(long)]
        matrix: Option<String>,
    },
    /// Fit the flow estimator on a dataset.
    Train,
    /// Score a checkpoint against a dataset's true sources.
    Eval,
    /// Reproduce a results table as CSV.
    Reproduce {
        /// Defaults to the config's `reproduce.figure`.
        figure: Option<Figure>,
    },
    /// Exhaustive support-level identifiability scan.
    Oracle,
}

/// Pretty JSON on stdout; a closed pipe is not an error.
fn emit(v: &serde_json::Value) -> ica_core::Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run(cli: Cli) -> ica_core::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    config.resolve_paths(cli.config.as_deref());
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    commands::ensure_dir(&cli.out)?;
    let ctx = Context {
        hash: config.hash(),
        config,
        out: cli.out,
        fast: cli.fast,
    };
    let (name, files) = match &cli.command {
        Command::Gen => ("gen", commands::gen(&ctx)?),
        Command::CheckSupport { matrix } => {
            let (files, report) = commands::check_support(&ctx, matrix.as_deref())?;
            emit(&report)?;
            ("check-support", files)
        }
        Command::Train => ("train", commands::train(&ctx)?),
        Command::Eval => {
            let (files, report) = commands::eval(&ctx)?;
            emit(&report)?;
            ("eval", files)
        }
        Command::Reproduce { figure } => {
            let fig = figure.unwrap_or(ctx.config.reproduce.figure);
            ("reproduce", commands::reproduce(&ctx, fig)?)
        }
        Command::Oracle => {
            let (files, summary) = commands::oracle(&ctx)?;
            emit(&summary)?;
            ("oracle", files)
        }
    };
    ctx.manifest(name, &files)?;
    for f in &files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
