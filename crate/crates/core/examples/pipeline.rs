//! The command-line pipeline driven from code: write a panel, then run
//! calibrate, simulate, diagnose and backtest into a scratch directory.
//!
//! ```text
//! cargo run --release --example pipeline [output-dir]
//! ```

use std::path::PathBuf;

use nalgebra::DMatrix;
use nested_factor::config::RunConfig;
use nested_factor::data::write_wide;
use nested_factor::linfactor::LinearFactorModel;
use nested_factor::pipeline::{cmd_backtest, cmd_calibrate, cmd_diagnose, cmd_simulate};
use nested_factor::simengine::{Generator, GeneratorSpec};
use nested_factor::volcal::VolModel;

fn main() -> nested_factor::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nestfac-demo"));
    let n = 16;
    let w = DMatrix::from_fn(2, n, |k, i| if k == 0 { 0.55 } else if i < n / 2 { 0.35 } else { -0.35 });
    let spec = GeneratorSpec::new(
        LinearFactorModel::new(w)?,
        VolModel::uniform(2, n, 0.4, 0.3, 0.2, 0.2, -0.5, -0.8),
        3000,
        1,
    )?;
    let input = out.join("input.csv");
    write_wide(&Generator::new(&spec)?.simulate()?, &input, None)?;

    let mut cfg = RunConfig::default();
    cfg.input.panel = input;
    cfg.output.dir = out.clone();
    cfg.linear.n_factors = 2;
    cfg.diagnose.n_sim = 5000;
    cfg.diagnose.grid_points = 21;
    cfg.backtest.t_os = 40;
    cfg.backtest.schemes = ["empirical", "ledoit-wolf:0.5", "clipped:2", "multifactor:2"].map(String::from).to_vec();
    std::fs::write(out.join("run.toml"), cfg.to_toml()).map_err(|e| nested_factor::Error::Config(e.to_string()))?;

    for (name, outcome) in [
        ("calibrate", cmd_calibrate(&cfg)?),
        ("simulate", cmd_simulate(&cfg)?),
        ("diagnose", cmd_diagnose(&cfg)?),
        ("backtest", cmd_backtest(&cfg)?),
    ] {
        println!("{name}: {}", outcome.dir.display());
        for f in &outcome.files {
            println!("  {f}");
        }
    }
    println!("\nthe same run from the shell: nestfac calibrate --config {}", out.join("run.toml").display());
    Ok(())
}
