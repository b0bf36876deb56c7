use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "raimkit", version, about = "Guided multi-channel attention for multimodal ICU time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    /// decomp, los or los_days.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory (or file, for evaluate).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort of episode files and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of episodes.
        #[arg(long)]
        n: Option<usize>,
        /// Overwrite an existing cohort.
        #[arg(long)]
        force: bool,
    },
    /// Window and label a directory of episode files.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Directory of `*.episode` files.
        #[arg(long)]
        episodes: PathBuf,
        /// Report malformed episodes and keep going.
        #[arg(long)]
        skip_bad: bool,
    },
    /// Train one variant on an ingested dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score checkpoints on a dataset; several checkpoints give a comparison table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Which windows to score: test (held-out patients), train or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Per-step risk and attention for one episode.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        /// Also draw an SVG heat map.
        #[arg(long)]
        svg: bool,
    },
    /// Finite-difference check of every primitive and a tiny end-to-end model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Flip the sign of one op's backward rule (self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = commands::init_threads().and_then(|_| match cli.command {
        Command::Generate { common, n, force } => commands::generate(&common, n, force),
        Command::Ingest {
            common,
            episodes,
            skip_bad,
        } => commands::ingest(&common, &episodes, skip_bad),
        Command::Train { common, data } => commands::train(&common, &data),
        Command::Evaluate {
            common,
            data,
            checkpoint,
            split,
        } => commands::evaluate(&common, &data, &checkpoint, &split),
        Command::Predict {
            common,
            checkpoint,
            episode,
            svg,
        } => commands::predict(&common, &checkpoint, &episode, svg),
        Command::Gradcheck { common, inject_fault } => commands::gradcheck(&common, inject_fault.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
