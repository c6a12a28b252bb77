//! `polygrain`: generate polycrystal datasets, train and evaluate the energy
//! surrogates, run the consistency checks, and drive the material-point
//! fracture demo, all from one TOML configuration.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "polygrain", version, about = "Polycrystal energy surrogate pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short = 'c', global = true, default_value = "polygrain.toml")]
    config: PathBuf,
    /// Worker threads for dataset labeling; results are identical for any
    /// value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the RVE family, contact graphs, and labeled dataset.
    Gen,
    /// Train the configured variant on the dataset; writes the checkpoint,
    /// training history, and a response surface.
    Train,
    /// Cross-validate the configured variants; writes fold metrics and
    /// per-RVE error distributions.
    Eval,
    /// Run the consistency checks against the trained checkpoint.
    Verify,
    /// Drive a strain ramp with damage through the trained model.
    DemoPhasefield,
    /// Merge the artifacts in the output directory into a text report.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Verify => "verify",
            Command::DemoPhasefield => "demo-phasefield",
            Command::Report => "report",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let result = RunConfig::load(&cli.config)
        .and_then(|cfg| commands::run(cli.command.name(), &cfg, cli.threads));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
