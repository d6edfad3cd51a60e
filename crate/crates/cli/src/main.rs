mod commands;
mod config;
mod error;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Preset};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "srcverify", version, about = "Source verification and splice scanning for synthetic speech")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML experiment configuration, layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base preset for every hyperparameter not set elsewhere.
    #[arg(long, global = true, value_enum, default_value = "toy")]
    preset: Preset,

    /// Override one config value, e.g. `--set phase2.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-generator corpus as WAV files plus a manifest.
    SynthCorpus(commands::synth::SynthArgs),
    /// Phase 1 (source tracing) and/or Phase 2 (similarity) training.
    Train(commands::train::TrainArgs),
    /// Open-set verification metrics, baselines and the detection matrix.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Sliding-window splice scan of one WAV file or a directory of them.
    Scan(commands::scan::ScanArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthCorpus(_) => "synth-corpus",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Scan(_) => "scan",
        }
    }
}

fn resolve(global: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::resolve(global.preset, global.config.as_deref(), &global.overrides)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.out = Some(out.clone());
    }
    cfg.out.get_or_insert_with(|| PathBuf::from("out"));
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli.global)?;
    let ctx = run::RunContext::start(cli.command.name(), cfg)?;
    match cli.command {
        Command::SynthCorpus(args) => commands::synth::run(&ctx, args),
        Command::Train(args) => commands::train::run(&ctx, args),
        Command::Evaluate(args) => commands::evaluate::run(&ctx, args),
        Command::Scan(args) => commands::scan::run(&ctx, args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
