use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distill_cli::config::{ExperimentConfig, PlotOptions};
use distill_cli::plot::plot_ensemble;
use distill_cli::snapshot::read_snapshot;
use distill_cli::{ablate_cfg, run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "distill", version, about = "Particle score distillation experiments")]
struct Cli {
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs every method of an experiment config.
    Run { config: PathBuf },
    /// Runs PFD over the config's guidance-scale grid.
    AblateCfg { config: PathBuf },
    /// Renders a snapshot CSV as SVG.
    Plot {
        snapshot: PathBuf,
        out: PathBuf,
        /// Config supplying target rings and plot options.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let opts = RunOptions { seed: cli.seed, out_dir: cli.out_dir };
    match cli.command {
        Command::Run { config } => {
            let m = run(ExperimentConfig::load(&config)?, &opts)?;
            println!("{}", m.path().display());
        }
        Command::AblateCfg { config } => {
            let m = ablate_cfg(ExperimentConfig::load(&config)?, &opts)?;
            println!("{}", m.path().display());
        }
        Command::Plot { snapshot, out, config } => {
            let snap = read_snapshot(&snapshot)?;
            let cfg = config.map(|c| ExperimentConfig::load(&c)).transpose()?;
            let plot = cfg.as_ref().map(|c| c.plot.clone()).unwrap_or_else(|| {
                let extent = snap.positions.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
                PlotOptions { bounds: 1.1 * extent, ..PlotOptions::default() }
            });
            let rings = cfg.as_ref().and_then(|c| c.target.rings());
            plot_ensemble(&snap.positions, rings, &plot, Some(&format!("τ={}", snap.tau)), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
