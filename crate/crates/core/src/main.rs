use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nipa::config::ExperimentConfig;
use nipa::error::{Error, Result};
use nipa::experiment;

/// Gated hybrid posterior sampler for Bayesian neural networks.
#[derive(Parser)]
#[command(name = "nipa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must not exist.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep at most N data rows.
    #[arg(long, value_name = "N")]
    subsample: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset a config describes.
    Generate(RunArgs),
    /// Run the configured sampler.
    Sample(RunArgs),
    /// Recompute metrics from a finished run directory.
    Metrics {
        run_dir: PathBuf,
        /// Baseline metrics file for the speedup column.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Write the metrics here instead of stdout; must not exist.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speedup of a candidate run over a baseline run.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
    },
}

fn resolve(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.subsample {
        cfg.target.subsample = Some(n);
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| experiment::default_out_dir(&cfg));
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let (cfg, out) = resolve(&args)?;
            experiment::generate(&cfg, &out)?;
            println!("{}", out.display());
        }
        Command::Sample(args) => {
            let (cfg, out) = resolve(&args)?;
            let run = experiment::sample(&cfg, &out)?;
            print!("{}", run.metrics.to_key_value());
        }
        Command::Metrics {
            run_dir,
            baseline,
            out,
        } => {
            let m = experiment::recompute_metrics(&run_dir, baseline.as_deref())?;
            match out {
                Some(path) if path.exists() => return Err(Error::OutputExists(path)),
                Some(path) => std::fs::write(path, m.to_key_value())?,
                None => print!("{}", m.to_key_value()),
            }
        }
        Command::Compare {
            baseline,
            candidate,
        } => {
            let (_, table) = experiment::compare(&baseline, &candidate)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("NIPA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not set thread count: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::InvalidConfig(errs)) => {
            eprintln!("error: invalid configuration");
            for e in errs {
                eprintln!("  - {e}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
