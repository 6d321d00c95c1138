//! Argument parsing and dispatch for the `rdml` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rdml::FixedSide;

use crate::commands::{build_dataset, format_summary, format_sweep};
use crate::{run_divcurve, run_sweep, run_train, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rdml", version, about = "Cohort training with Rényi mutual learning")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `experiment.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    P,
    Q,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one cohort at `train.alpha` and `train.seed`.
    Train(RunArgs),
    /// Independent baseline plus every alpha of the grid over every seed.
    Sweep(RunArgs),
    /// Two-event divergence curves against a fixed distribution (a, 1 - a).
    Divcurve {
        #[arg(long, value_enum)]
        fixed: Side,
        #[arg(long)]
        a: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 999)]
        grid: usize,
        /// Output directory for `divcurve.tsv`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn prepare(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    config.apply_overrides(args.seed, args.alpha)?;
    let out = args.out.clone().unwrap_or_else(|| config.experiment.out_dir.clone());
    Ok((config, out))
}

/// Runs one invocation (`args[0]` is the program name) and returns what goes to stdout.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let stdout = match cli.command {
        Cmd::Train(args) => {
            let (config, out) = prepare(&args)?;
            let data = build_dataset(&config.dataset)?;
            format_summary(&run_train(&config, &data, &out)?)
        }
        Cmd::Sweep(args) => {
            let (config, out) = prepare(&args)?;
            let data = build_dataset(&config.dataset)?;
            format_sweep(&run_sweep(&config, &data, &out)?)
        }
        Cmd::Divcurve {
            fixed,
            a,
            alphas,
            grid,
            out,
        } => {
            if grid < 2 {
                bail!("--grid must be at least 2");
            }
            let side = match fixed {
                Side::P => FixedSide::P,
                Side::Q => FixedSide::Q,
            };
            let path = out.join("divcurve.tsv");
            let rows = run_divcurve(side, a, &alphas, grid, &path)?;
            format!("wrote {} rows to {}\n", rows.len(), path.display())
        }
    };
    Ok(stdout)
}
