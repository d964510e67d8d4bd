mod checkpoint;
mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hop", version, about = "Generalized few-shot point-cloud segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML file with configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, support-pool and test scenes into OUT/data.
    Gen(Common),
    /// Base pretraining; writes OUT/phase1.ckpt (with the projection basis).
    Phase1(Common),
    /// Novel-class adaptation from OUT/phase1.ckpt; writes OUT/phase2.ckpt.
    Phase2(Common),
    /// Evaluate the latest checkpoint on the test scenes.
    Eval(Common),
    /// Run the flag grid and sweeps over several seeds into OUT/ablate.
    Ablate(Common),
    /// Summarize ablation metrics found under a directory into CSV tables.
    Report {
        /// Directory searched recursively for `runs.jsonl` files.
        metrics: PathBuf,
        /// Where the CSV tables go (defaults to METRICS/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(c) => commands::gen(&c),
        Command::Phase1(c) => commands::phase1(&c),
        Command::Phase2(c) => commands::phase2(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Report { metrics, out } => commands::report(&metrics, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
