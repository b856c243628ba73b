use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowsteer::harness::experiment::{self, RunOutput};
use flowsteer::harness::ExperimentConfig;
use flowsteer::{Error, Result};

/// Scheduled fidelity conditioning of flow samplers for image restoration.
#[derive(Parser, Debug)]
#[command(name = "flowsteer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a config field, e.g. `--set dataset.count=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config instead of running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the shape (or mixture) dataset as PPM and FST files.
    GenData(Common),
    /// Train a velocity network and write its checkpoint.
    TrainFlow(Common),
    /// Synthesize measurements for every dataset item.
    Degrade(Common),
    /// Restore every item and write images, traces and metrics.
    Restore(Common),
    /// Invert every item to the noise end and report round-trip error.
    Invert(Common),
    /// Score restorations from a directory against the dataset.
    Evaluate(Common),
    /// Sweep the placement of a rectangular conditioning window.
    AblateSchedule(Common),
    /// Compare direct and clean-estimate projection.
    AblateProjection(Common),
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let base = match (&c.config, &c.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    base.with_overrides(&c.overrides)
}

fn run(cli: Cli) -> Result<Option<RunOutput>> {
    let (common, runner): (&Common, fn(&ExperimentConfig) -> Result<RunOutput>) = match &cli.command {
        Command::GenData(c) => (c, experiment::gen_data),
        Command::TrainFlow(c) => (c, experiment::train_flow),
        Command::Degrade(c) => (c, experiment::degrade),
        Command::Restore(c) => (c, experiment::restore),
        Command::Invert(c) => (c, experiment::invert),
        Command::Evaluate(c) => (c, experiment::evaluate),
        Command::AblateSchedule(c) => (c, experiment::ablate_schedule),
        Command::AblateProjection(c) => (c, experiment::ablate_projection),
    };
    let cfg = resolve(common)?;
    if common.print_config {
        println!("{}", cfg.to_json());
        return Ok(None);
    }
    runner(&cfg).map(Some)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Some(out)) => {
            for f in out.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
