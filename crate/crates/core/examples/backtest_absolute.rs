//! Risk of portfolios of absolute returns: the Gaussian factor model only
//! sees the linear correlations, the nested model also captures the
//! volatility co-movements.
//!
//! ```text
//! cargo run --release --example backtest_absolute
//! ```

use nalgebra::DMatrix;
use nested_factor::backtest::{over_perf, run_backtest, BacktestOptions, CleaningScheme, Track};
use nested_factor::linfactor::LinearFactorModel;
use nested_factor::simengine::{Generator, GeneratorSpec};
use nested_factor::volcal::VolModel;

fn main() -> nested_factor::Result<()> {
    let (n, m) = (30, 3);
    let (t_is, t_os, windows) = (2 * n, 40, 12);
    let w = DMatrix::from_fn(m, n, |k, i| match k {
        0 => 0.5,
        _ if i % 2 == k - 1 => 0.35,
        _ => 0.0,
    });
    let vol = VolModel::uniform(m, n, 0.4, 0.3, 0.2, 0.2, -0.5, -0.8);
    let spec = GeneratorSpec::new(LinearFactorModel::new(w)?, vol, t_is + 1 + windows * t_os, 8)?;
    let panel = Generator::new(&spec)?.simulate()?;

    let mut schemes = vec![CleaningScheme::Empirical, CleaningScheme::Clipped { m }];
    for m in [1, 3] {
        schemes.push(CleaningScheme::GaussianFactor { m });
        schemes.push(CleaningScheme::NestedFactor { m, k: 1 });
    }
    let opts = BacktestOptions {
        t_is: Some(t_is),
        t_os,
        n_sim: 20_000,
        ..Default::default()
    };
    let reports = run_backtest(&panel, &schemes, Track::Absolute, &opts)?;
    println!("  scheme              mean IS   mean OS");
    for r in &reports {
        println!("  {:<18}  {:.4}    {:.4}", r.scheme.to_string(), r.mean_is, r.mean_os);
    }
    for pair in reports[2..].chunks(2) {
        println!(
            "  over-performance of the nested model at M = {}: {:+.4}",
            pair[0].scheme.parameter(),
            over_perf(pair[1].mean_os, pair[0].mean_os)?
        );
    }
    Ok(())
}
