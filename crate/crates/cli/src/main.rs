use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use dpr_cli::config::PipelineConfig;
use dpr_cli::{
    cmd_annotate, cmd_evaluate, cmd_gen_data, cmd_label, cmd_pipeline, cmd_train_policy,
    cmd_train_reward,
};
use dpr_core::reward::Method;
use dpr_core::CoreError;

/// Preference-based reward learning with diffusion classifiers and
/// downstream offline RL, end to end on built-in toy environments.
#[derive(Debug, Parser)]
#[command(name = "dpr", version, about)]
struct Cli {
    /// TOML config file; every key has a default, unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the reward method (dpr | cdpr | bt | oracle).
    #[arg(long, global = true)]
    method: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the offline dataset, ground-truth sidecar and anchors.
    GenData,
    /// Sample segment pairs and label them with the scripted teacher.
    Label,
    /// Train the configured reward model on the preference file.
    TrainReward,
    /// Fill dataset rewards from the trained model (or the oracle sidecar).
    Annotate,
    /// Train the downstream offline RL policy on the annotated dataset.
    TrainPolicy,
    /// Evaluate the trained policy (normalized scores over seeds).
    Evaluate,
    /// Run every stage in order; with several methods, write a comparison.
    Pipeline,
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig, CoreError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(m) = &cli.method {
        cfg.reward.method = Method::from_str(m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn category(err: &CoreError) -> &'static str {
    match err {
        CoreError::Config(_) => "config",
        CoreError::Shape(_) => "shape",
        CoreError::Data(_) => "data",
        CoreError::Train(_) => "train",
        CoreError::Io(_) => "io",
        CoreError::Serde(_) => "serde",
    }
}

fn run(cli: &Cli) -> Result<(), CoreError> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Label => cmd_label(&cfg),
        Command::TrainReward => cmd_train_reward(&cfg),
        Command::Annotate => cmd_annotate(&cfg),
        Command::TrainPolicy => cmd_train_policy(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg).map(|_| ()),
        Command::Pipeline => cmd_pipeline(&cfg).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", category(&e));
            match e {
                CoreError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
