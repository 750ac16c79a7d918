mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{AttributesArgs, EvalArgs, GenArgs, ObstructArgs, SweepArgs};

/// Learning-to-obstruct laboratory.
#[derive(Parser, Debug)]
#[command(name = "lto", version)]
struct Cli {
    /// Worker threads for per-task gradients and evaluation episodes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; `lto-out` when neither this nor the environment sets it.
    /// `eval` writes into the run directory by default.
    #[arg(long, global = true, env = "LTO_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic superclass dataset as CSV plus digest.
    Gen(GenArgs),
    /// Run LTO or a baseline and write checkpoints and a manifest.
    Obstruct(ObstructArgs),
    /// Evaluate a run's checkpoints: metric CSV and Δ@β summary.
    Eval(EvalArgs),
    /// Data, time or cross-learner sweep.
    Sweep(SweepArgs),
    /// Attribute-mode obstruction with AUROC evaluation.
    Attributes(AttributesArgs),
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let fallback = PathBuf::from("lto-out");
    let out = cli.out_dir.as_deref().unwrap_or(&fallback);
    match &cli.cmd {
        Command::Gen(a) => commands::gen(a, out),
        Command::Obstruct(a) => commands::obstruct_cmd(a, out),
        Command::Eval(a) => commands::eval_cmd(a, cli.out_dir.as_deref()),
        Command::Sweep(a) => commands::sweep_cmd(a, out),
        Command::Attributes(a) => commands::attributes_cmd(a, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            // clap's own rendering already starts with `error:`
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
