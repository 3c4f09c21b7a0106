//! `brw`: command-line runner for the brw-lab experiments.
//!
//! Each subcommand runs one experiment from a TOML config (or the built-in
//! dyadic defaults when no config is given), prints one line per verdict,
//! and exits 0 only if every check passed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brw_lab::cli::{run_subcommand, ExperimentConfig, ExperimentKind, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "brw",
    about = "Monte Carlo experiments on branching random walk martingales",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in dyadic config of
    /// the chosen subcommand.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,

    /// Worker thread override.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,

    /// Output directory override (also settable via BRW_LAB_OUT).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full finite-n identity battery.
    Verify(Common),
    /// Estimate the renewal function by both estimators and check it.
    Renewal(Common),
    /// Sample the fluctuation statistic against its stable-mixture reference.
    Fluctuation(Common),
    /// Track the Seneta-Heyde ratio across a generation grid.
    SenetaHeyde(Common),
    /// Check the 1-stable sampler against its characteristic exponent.
    StableCheck(Common),
    /// Report scaled survival probabilities of the associated walk.
    DeltaN(Common),
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::Verify(c) => (ExperimentKind::VerifyIdentities, c),
            Command::Renewal(c) => (ExperimentKind::RenewalBuild, c),
            Command::Fluctuation(c) => (ExperimentKind::Fluctuation, c),
            Command::SenetaHeyde(c) => (ExperimentKind::SenetaHeyde, c),
            Command::StableCheck(c) => (ExperimentKind::StableCheck, c),
            Command::DeltaN(c) => (ExperimentKind::DeltaNReport, c),
        }
    }
}

fn main() -> ExitCode {
    let (kind, common) = Cli::parse().command.split();
    let config = match &common.config {
        Some(path) => ExperimentConfig::from_path(path),
        None => Ok(ExperimentConfig::default_for(kind)),
    };
    let config = match config {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let overrides = Overrides {
        seed: common.seed,
        workers: common.workers,
        out: common.out,
    };
    match run_subcommand(kind, &config, &overrides) {
        Ok(result) => {
            print!("{}", result.render());
            for artifact in &result.artifacts {
                println!("artifact: {artifact}");
            }
            if result.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
