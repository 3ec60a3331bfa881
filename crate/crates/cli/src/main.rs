mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "redsketch", version, about = "Sketched Newton-CG spectral CT decomposition with denoising priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration, or a run directory's meta.json.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set solver.max_outer=10`.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate photon counts; writes counts.bin, truth.bin and meta.json.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Reconstruct material images from counts.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Counts file (defaults to counts.bin in the output directory).
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Tabulate and plot several reconstruction runs of the same phantom.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
    /// Dump the per-view leverage-score sampling distribution.
    Scores {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Also compute exact scores from the materialized operator (small problems only).
        #[arg(long)]
        exact: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { cfg } => commands::simulate(&cfg),
        Command::Reconstruct { cfg, counts } => commands::reconstruct(&cfg, counts.as_deref()),
        Command::Compare { runs, out } => commands::compare(&runs, &out),
        Command::Scores { cfg, counts, exact } => commands::scores(&cfg, counts.as_deref(), exact),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
