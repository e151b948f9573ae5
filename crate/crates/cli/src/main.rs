use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing::error;

use synthpaste::gateway::BackendKind;
use synthpaste::pipeline::{stats_for, validate_dataset, Pipeline, PipelineConfig, Stage, StageReport};
use synthpaste::{Error, Result};

/// Synthetic copy-paste dataset generator.
#[derive(Debug, Parser)]
#[command(name = "synthpaste", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model backend, overrides the configuration.
    #[arg(long, global = true, value_parser = ["mock", "remote"])]
    backend: Option<String>,
    /// Sidecar base URL, overrides the configuration.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Worker pool size.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Workspace directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Log as JSON lines.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage of the recipe, skipping completed ones.
    Run,
    /// Caption the context images and mine background prompts.
    MineCdi,
    /// Generate foreground candidates.
    GenForegrounds,
    /// Generate background candidates.
    GenBackgrounds,
    /// Rank candidates, extract masks and build the asset pools.
    Filter,
    /// Compose the synthetic dataset.
    Compose,
    /// Mix real images into the synthetic dataset.
    Mix,
    /// Write and print dataset statistics.
    Stats,
    /// Check a dataset directory (default: the workspace dataset).
    Validate { dir: Option<PathBuf> },
    /// Print the nominal pool and dataset sizes of the configuration.
    Plan,
    /// Print a default configuration for the given labels.
    Init {
        #[arg(required = true, num_args = 1..)]
        labels: Vec<String>,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::MineCdi => Some(Stage::MineCdi),
            Command::GenForegrounds => Some(Stage::GenForegrounds),
            Command::GenBackgrounds => Some(Stage::GenBackgrounds),
            Command::Filter => Some(Stage::Filter),
            Command::Compose => Some(Stage::Compose),
            Command::Mix => Some(Stage::Mix),
            Command::Stats => Some(Stage::Stats),
            _ => None,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(backend) = &cli.backend {
        config.gateway.backend = backend.parse::<BackendKind>()?;
    }
    if let Some(endpoint) = &cli.endpoint {
        config.gateway.endpoint = endpoint.clone();
    }
    if cli.workers.is_some() {
        config.workers = cli.workers;
    }
    config.validate()?;
    Ok(config)
}

fn print_report(report: &StageReport) {
    println!("{:<16} {:<8} {}", report.stage.name(), format!("{:?}", report.outcome).to_lowercase(), report.summary);
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::Init { labels } = &cli.command {
        let mut config = PipelineConfig::new(labels);
        config.master_seed = cli.seed.unwrap_or(0);
        config.class_labels()?;
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    if let Command::Validate { dir: Some(dir) } = &cli.command {
        let report = validate_dataset(dir)?;
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    let pipeline = Pipeline::new(load_config(cli)?, &cli.out)?;
    match &cli.command {
        Command::Run => {
            let report = pipeline.run()?;
            report.stages.iter().for_each(print_report);
            println!("dataset {} ({} images)", report.dataset_dir.display(), report.manifest.images.len());
        }
        Command::Validate { .. } => {
            let report = validate_dataset(&pipeline.dataset_dir())?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Plan => {
            let plan = pipeline.count_plan()?;
            println!("real images  {}", plan.real_images);
            println!("foregrounds  {}", plan.foregrounds);
            println!("backgrounds  {}", plan.backgrounds);
            println!("training     {}", plan.training);
        }
        command => {
            let stage = command.stage().expect("stage command");
            print_report(&pipeline.run_stage(stage)?);
            if stage == Stage::Stats {
                print!("{}", stats_for(&pipeline.dataset_dir())?.to_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let subscriber = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        );
    if cli.json_logs {
        subscriber.json().init();
    } else {
        subscriber.init();
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!(code = e.exit_code(), "{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
