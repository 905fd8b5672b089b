mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spreadflow::{Error, ObjectiveMode};

#[derive(Parser)]
#[command(name = "spreadflow", version, about = "Flows with a learned degenerate Gaussian prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where a run's configuration comes from. Precedence, lowest first:
/// preset, flags, config file.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Named configuration, e.g. toy-sin or known-rank-2
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON config; its fields override presets and flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub mode: Option<ObjectiveMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset as CSV with a JSON sidecar
    Gen {
        #[command(flatten)]
        run: RunArgs,
        /// Number of samples; defaults to the configured dataset size
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a flow with a learned prior
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Eigen-spectrum, projections and density curves of a checkpoint
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = spreadflow::prior::DEFAULT_RANK_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the fixed-prior maximum-likelihood baseline
    Baseline {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SPREADFLOW_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { run, n } => commands::gen(&run, n),
        Command::Train { run } => commands::train(&run),
        Command::Analyze {
            checkpoint,
            threshold,
            out,
        } => commands::analyze(&checkpoint, threshold, out.as_deref()),
        Command::Sample {
            checkpoint,
            n,
            seed,
            out,
        } => commands::sample(&checkpoint, n, seed, out.as_deref()),
        Command::Baseline { run } => commands::baseline(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config_error = matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. }));
            eprintln!("error: {e:#}");
            if let Some(Error::Diverged {
                checkpoint: Some(p), ..
            }) = e.downcast_ref::<Error>()
            {
                eprintln!("last checkpoint: {}", p.display());
            }
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
