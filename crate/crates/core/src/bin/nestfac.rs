use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nested_factor::config::RunConfig;
use nested_factor::pipeline::{cmd_backtest, cmd_calibrate, cmd_diagnose, cmd_simulate, Outcome};
use nested_factor::Error;

/// Calibrate, simulate, diagnose and backtest the nested factor model.
#[derive(Parser)]
#[command(name = "nestfac", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.threads` (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Skip SVG figures.
    #[arg(long, global = true)]
    no_plots: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fit the linear and volatility models to the input panel.
    Calibrate,
    /// Simulate a panel from the calibrated model or a generator file.
    Simulate,
    /// Copula and quadratic-correlation diagnostics, empirical vs model.
    Diagnose,
    /// In-sample/out-of-sample risk of correlation-cleaning schemes.
    Backtest,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if cli.no_plots {
        cfg.output.plots = false;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Option<Outcome>, Error> {
    let cfg = effective_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(None);
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (calibrate, simulate, diagnose or backtest)".into()));
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.run.threads)))?;
    let outcome = match command {
        Command::Calibrate => cmd_calibrate(&cfg)?,
        Command::Simulate => cmd_simulate(&cfg)?,
        Command::Diagnose => cmd_diagnose(&cfg)?,
        Command::Backtest => cmd_backtest(&cfg)?,
    };
    Ok(Some(outcome))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Some(outcome)) => {
            for f in &outcome.files {
                println!("{}", outcome.dir.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_or_io() { 2 } else { 3 })
        }
    }
}
