use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fcplan::experiment::{ExperimentConfig, Run};
use fcplan::Error;

#[derive(Parser)]
#[command(name = "fcplan", version, about = "Plan resource-efficient floating content strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON); full-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides the config's `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit the generation timestamp from SVG reports.
    #[arg(long, global = true)]
    deterministic_svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build and serialize the road grid.
    Grid,
    /// Simulate or ingest mobility and write trace statistics.
    Mobility,
    /// Write the deployment scenario's mobility features.
    Features,
    /// Build the training set from randomized schemes.
    Dataset,
    /// Train the surrogate and the classical baselines.
    Train,
    /// Plan the floating period and the comparison strategies.
    Bootstrap,
    /// Simulate the planned strategies, or one given scheme.
    Evaluate {
        /// Scheme CSV to evaluate instead of the planned strategies.
        #[arg(long)]
        scheme: Option<PathBuf>,
    },
    /// Emit box-plot data, savings table and strategy heatmaps.
    Report,
    /// Every stage in order.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Grid => "grid",
            Command::Mobility => "mobility",
            Command::Features => "features",
            Command::Dataset => "dataset",
            Command::Train => "train",
            Command::Bootstrap => "bootstrap",
            Command::Evaluate { .. } => "evaluate",
            Command::Report => "report",
            Command::Pipeline => "pipeline",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Unknown { .. } => 2,
        Error::Dependency { .. } => 3,
        Error::Infeasible => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> fcplan::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => {
            return Err(Error::Validation(vec![format!("config file {} does not exist", p.display())]));
        }
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("fcplan-run"));
    cfg.output = None;
    let mut run = Run::open(cfg, &out)?;
    run.deterministic_svg = cli.deterministic_svg;
    let scheme = match &cli.command {
        Command::Evaluate { scheme } => scheme.clone(),
        _ => None,
    };
    run.run_stage(cli.command.name(), scheme.as_deref())?;
    log::info!("{} done, artifacts in {}", cli.command.name(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
