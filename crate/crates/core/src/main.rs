use std::path::PathBuf;

use anyhow::{Context, Result};
use bbo_forge::pipeline::{self, PipelineConfig, StageOptions, Workspace};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bbo-forge",
    version,
    about = "Optimizer trajectories as a language: generate, encode, train, optimize, evaluate"
)]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set generate.budget=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed (overrides `seed` in the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root.
    #[arg(
        long,
        env = "BBO_FORGE_DATA_DIR",
        default_value = "bbo-data",
        global = true
    )]
    data_dir: PathBuf,
    /// Validate and print the plan without touching disk.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Parallel independent runs (generate, optimize).
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimizer grid and write trajectories plus a manifest.
    Generate,
    /// Permutation and prefix augmentation of generated trajectories.
    Augment,
    /// Encode trajectories into the text corpus.
    Encode {
        /// Decode every record again and report round-trip violations.
        #[arg(long)]
        verify: bool,
    },
    /// Train the BPE tokenizer on the corpus.
    Tokenize,
    /// Assign tasks to train and validation splits.
    Split,
    /// Train a model and write its checkpoint and loss curve.
    Train,
    /// Use a trained model as an optimizer.
    Optimize,
    /// Best-so-far curves, ranks and regret as CSV.
    Evaluate,
    /// Pareto front and power-law fit of training measurements.
    ScalingFit,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let text = match &cli.config {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let mut cfg = PipelineConfig::from_toml(&text, &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs == 0 {
        anyhow::bail!("--jobs must be at least 1");
    }
    let ws = Workspace::new(&cli.data_dir);
    let opts = StageOptions {
        jobs: cli.jobs,
        dry_run: cli.dry_run,
    };
    let report = match cli.command {
        Command::Generate => pipeline::generate(&cfg, &ws, opts),
        Command::Augment => pipeline::augment(&cfg, &ws, opts),
        Command::Encode { verify } => pipeline::encode(&cfg, &ws, opts, verify),
        Command::Tokenize => pipeline::tokenize(&cfg, &ws, opts),
        Command::Split => pipeline::split(&cfg, &ws, opts),
        Command::Train => pipeline::train(&cfg, &ws, opts, &mut |l| eprintln!("{l}")),
        Command::Optimize => pipeline::optimize(&cfg, &ws, opts),
        Command::Evaluate => pipeline::evaluate(&cfg, &ws, opts),
        Command::ScalingFit => pipeline::scaling_fit(&cfg, &ws, opts),
    }?;
    for line in report {
        println!("{line}");
    }
    Ok(())
}
