use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mtln_cli::commands;
use mtln_cli::config::RunConfig;
use mtln_cli::{CliError, Result};
use mtln_core::data::Split;

/// Fetal-head segmentation and ellipse biometrics: phantom data,
/// augmentation, splits, training, evaluation, and inference.
#[derive(Parser)]
#[command(name = "mtln", version, max_term_width = 100)]
struct Cli {
    /// JSON run configuration file (default: built-in defaults, the same
    /// as an empty document {})
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; overrides the config's seed (default: config seed, else 0)
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory that relative artifact paths resolve against
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset, all samples in the train split
    Phantom {
        /// Number of base images (default: the config's data.count)
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Expand each original into flips and rotations that keep the head in frame
    Augment,
    /// Reassign train/val/test splits by base image
    Split,
    /// Train a model; writes the checkpoint and per-epoch loss log
    Train,
    /// Score a checkpoint on one split; writes the metrics report
    Eval {
        /// Split to evaluate: train, val, or test
        #[arg(long, value_name = "SPLIT", default_value = "test")]
        split: String,
    },
    /// Predict masks and ellipse parameters for raw PGM images
    Infer {
        /// Directory containing input .pgm images
        #[arg(long, value_name = "DIR")]
        images: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cfg.effective_seed(cli.seed);
    std::fs::create_dir_all(&cli.out).map_err(CliError::io(&cli.out))?;
    match cli.cmd {
        Cmd::Phantom { count } => commands::cmd_phantom(&cfg, &cli.out, seed, count),
        Cmd::Augment => commands::cmd_augment(&cfg, &cli.out),
        Cmd::Split => commands::cmd_split(&cfg, &cli.out, seed),
        Cmd::Train => commands::cmd_train(&cfg, &cli.out, seed),
        Cmd::Eval { split } => {
            let split = Split::parse(&split)
                .ok_or_else(|| CliError::Config(format!("unknown split {split:?}")))?;
            commands::cmd_eval(&cfg, &cli.out, split)
        }
        Cmd::Infer { images } => commands::cmd_infer(&cfg, &cli.out, &images),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
