//! Command-line entry point wiring the full pipeline:
//! synth -> prepare -> train -> predict -> evaluate -> report.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nowcast_core::config::KvConfig;
use stages::Env;

#[derive(Parser)]
#[command(
    name = "nowcast",
    version,
    about = "Radar precipitation nowcasting at desk scale: synthetic scenes, a U-Net, baselines, PR evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a single config key (repeatable), e.g. --set train.steps=500
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Master seed; recorded in every artifact.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root directory for artifacts (frames/, manifests/, checkpoints/,
    /// predictions/, reports/).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic radar sequences as NWC1 frame files.
    Synth,
    /// Tile the sequences and write train/test dataset manifests.
    Prepare,
    /// Train the model on the oversampled train split.
    Train {
        /// Total optimizer steps (config key train.steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from a training checkpoint (config key train.resume).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write per-tile prediction files for one model.
    Predict {
        /// unet | persistence | oflow (config key predict.model).
        #[arg(long)]
        model: Option<String>,
        /// Model checkpoint path (config key predict.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score one model's predictions against the test labels.
    Evaluate {
        /// unet | persistence | oflow (config key predict.model).
        #[arg(long)]
        model: Option<String>,
    },
    /// Merge eval_*.csv files into report.csv and report.svg.
    Report,
    /// Run every stage in order with the current config.
    RunAll,
}

fn effective_config(cli: &Cli) -> anyhow::Result<KvConfig> {
    let mut kv = match &cli.common.config {
        Some(path) => KvConfig::from_file(path)?,
        None => KvConfig::new(),
    };
    for pair in &cli.common.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got '{pair}'"))?;
        kv.set(key.trim(), value.trim());
    }
    if let Some(seed) = cli.common.seed {
        kv.set("seed", seed);
    }
    if let Some(out_dir) = &cli.common.out_dir {
        kv.set("out_dir", out_dir.display());
    }
    match &cli.command {
        Command::Train { steps, resume } => {
            if let Some(steps) = steps {
                kv.set("train.steps", steps);
            }
            if let Some(resume) = resume {
                kv.set("train.resume", resume.display());
            }
        }
        Command::Predict { model, checkpoint } => {
            if let Some(model) = model {
                kv.set("predict.model", model);
            }
            if let Some(checkpoint) = checkpoint {
                kv.set("predict.checkpoint", checkpoint.display());
            }
        }
        Command::Evaluate { model } => {
            if let Some(model) = model {
                kv.set("predict.model", model);
            }
        }
        _ => {}
    }
    Ok(kv)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let env = Env::new(effective_config(cli)?)?;
    match &cli.command {
        Command::Synth => stages::run_synth(&env),
        Command::Prepare => stages::run_prepare(&env),
        Command::Train { .. } => stages::run_train(&env),
        Command::Predict { .. } => stages::run_predict(&env),
        Command::Evaluate { .. } => stages::run_evaluate(&env),
        Command::Report => stages::run_report(&env),
        Command::RunAll => stages::run_all(&env),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One line, machine parsable: error: <chain joined by ': '>.
            let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
