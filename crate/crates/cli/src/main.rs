//! `occfield` command-line pipeline.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, TrainMode};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "occfield", version, about = "Synthetic scenes, query supervision, occupancy fields and metrics")]
struct Cli {
    /// Run configuration file.
    #[arg(short, long, global = true, default_value = "run.ini")]
    config: PathBuf,

    /// Overrides `seed` in the run configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Canonical scene file and voxelised ground truth.
    Synth,
    /// One simulated point cloud per scan timestep.
    Scan,
    /// Balanced query set and its oracle check.
    Queries,
    /// Train the field; writes the model and the loss curve.
    Train {
        /// Overrides `mode` in [train].
        #[arg(long, value_parser = ["query", "rendering"])]
        mode: Option<String>,
    },
    /// IoU and RayIoU of the trained field.
    Eval,
    /// Contraction table, depth-bin edges and a BEV mass image.
    InspectGeometry,
    /// synth, scan, queries, train and eval in sequence.
    Pipeline,
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("QO_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("QO_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let cfg = RunConfig::load(&cli.config, cli.seed)?;
    let written = match cli.command {
        Command::Synth => commands::cmd_synth(&cfg)?,
        Command::Scan => commands::cmd_scan(&cfg)?,
        Command::Queries => commands::cmd_queries(&cfg)?,
        Command::Train { mode } => {
            let mode = match mode {
                Some(m) => m.parse::<TrainMode>().map_err(CliError::Config)?,
                None => cfg.mode,
            };
            commands::cmd_train(&cfg, mode)?
        }
        Command::Eval => commands::cmd_eval(&cfg)?,
        Command::InspectGeometry => commands::cmd_inspect_geometry(&cfg)?,
        Command::Pipeline => {
            let mut all = commands::cmd_synth(&cfg)?;
            all.extend(commands::cmd_scan(&cfg)?);
            all.extend(commands::cmd_queries(&cfg)?);
            all.extend(commands::cmd_train(&cfg, cfg.mode)?);
            all.extend(commands::cmd_eval(&cfg)?);
            all
        }
    };
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
