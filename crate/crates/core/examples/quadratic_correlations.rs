//! Analytic quadratic correlations `E[r_i^2 r_j^2]` of a one-mode nested
//! model against Monte Carlo, with both the cumulant closure of the
//! volatility MGF and the exact MGF of the sampling law.
//!
//! ```text
//! cargo run --release --example quadratic_correlations
//! ```

use nalgebra::DMatrix;
use nested_factor::diagnostics::{quadratic_corr_exact, quadratic_corr_model, quadratic_moments_mc};
use nested_factor::linfactor::LinearFactorModel;
use nested_factor::simengine::{Generator, GeneratorSpec};
use nested_factor::volcal::VolModel;

fn main() -> nested_factor::Result<()> {
    let (m, n) = (2, 4);
    let linear = LinearFactorModel::new(DMatrix::from_row_slice(
        m,
        n,
        &[0.5, 0.4, 0.3, 0.2, 0.1, 0.3, -0.2, 0.4],
    ))?;
    let vol = VolModel::new(
        DMatrix::from_column_slice(m, 1, &[0.4, 0.2]),
        DMatrix::from_column_slice(n, 1, &[0.3, 0.2, 0.4, 0.1]),
        vec![0.2, 0.1],
        vec![0.2, 0.2, 0.1, 0.3],
        -0.3,
        -0.6,
    )?;

    // Gaussian limit: 1 + 2 rho^2 off the diagonal, 3 on it
    let gaussian = VolModel::gaussian(m, n, 1);
    let rho = linear.model_correlation();
    println!(
        "Gaussian limit (0, 1): {:.6} = 1 + 2 * {:.4}^2",
        quadratic_corr_model(&linear, &gaussian, 0, 1)?,
        rho[(0, 1)]
    );

    let generator = Generator::new(&GeneratorSpec::new(linear.clone(), vol.clone(), 1, 3)?)?;
    let law = generator.law();
    let samples = 2_000_000;
    let (mc, se) = quadratic_moments_mc(&generator, samples);
    println!("\n pair   cumulant   exact law   Monte Carlo ({samples} draws)");
    for i in 0..n {
        for j in i..n {
            println!(
                "({i}, {j})   {:.5}    {:.5}     {:.5} +/- {:.5}",
                quadratic_corr_model(&linear, &vol, i, j)?,
                quadratic_corr_exact(&linear, &vol, &law, i, j)?,
                mc[(i, j)],
                se[(i, j)]
            );
        }
    }
    Ok(())
}
