//! Calibrate the linear factors and the nested volatility model on a
//! simulated panel, then compare with the parameters that generated it.
//! The moments of `Omega_0` are fitted under both MGF closures.
//!
//! ```text
//! cargo run --release --example calibrate
//! ```

use std::f64::consts::PI;

use nalgebra::DMatrix;
use nested_factor::data::standardize;
use nested_factor::linalg::{correlation, cosine};
use nested_factor::linfactor::{calibrate_weights, extract_series, pca_prior, subspace_distance, LinearFactorModel, WeightCalibration};
use nested_factor::nlcorr::spectral_summary;
use nested_factor::simengine::{Generator, GeneratorSpec};
use nested_factor::volcal::{calibrate_nested, reconstruct_omega, MgfClosure, NestedVolOptions, OmegaWeighting, VolModel};

fn main() -> nested_factor::Result<()> {
    let (n, m, t) = (40, 3, 8000);
    let w = DMatrix::from_fn(m, n, |k, i| match k {
        0 => 0.5,
        1 => if i < n / 2 { 0.35 } else { -0.35 },
        _ => 0.3 * (2.0 * PI * i as f64 / n as f64).cos(),
    });
    let truth = VolModel::uniform(m, n, 0.4, 0.3, 0.2, 0.2, -0.5, -0.8);
    let spec = GeneratorSpec::new(LinearFactorModel::new(w)?, truth.clone(), t, 1)?;
    let generator = Generator::new(&spec)?;
    let panel = standardize(&generator.simulate()?)?;

    // linear layer
    let (linear, report) = calibrate_weights(&panel, m, &WeightCalibration::default())?;
    let prior = pca_prior(&panel, m)?;
    println!(
        "weights: loss {:.3e} after {} iterations, distance to the PCA subspace {:.4}",
        report.loss,
        report.iterations,
        subspace_distance(&linear, &prior)?
    );

    // volatility layer
    let series = extract_series(&panel, &linear)?;
    let fit = calibrate_nested(&series, &NestedVolOptions::default())?;
    let spectrum = &spectral_summary(&fit.nlcorr, true)[0];
    println!(
        "top eigenvalues of the p-averaged log-abs correlations: ff {:.3?}, rr {:.3?}",
        &spectrum.ff.values[..2],
        &spectrum.rr.values[..3]
    );
    let vol = &fit.vol;
    println!("A       = {:.3?}", vol.a.as_slice());
    println!("cos(A, truth) = {:.4}", cosine(vol.a.as_slice(), truth.a.as_slice()));
    println!("cos(B, truth) = {:.4}", cosine(vol.b.as_slice(), truth.b.as_slice()));
    println!("true moments: zeta0 = {}, kappa0 = {}", truth.zeta0, truth.kappa0);
    println!("  cumulant closure: zeta0 = {:.3}, kappa0 = {:.3}", vol.zeta0, vol.kappa0);
    let mut exact = NestedVolOptions::default();
    exact.calibration.closure = MgfClosure::BetaLaw;
    let beta = calibrate_nested(&series, &exact)?.vol;
    println!("  Beta-law closure: zeta0 = {:.3}, kappa0 = {:.3}", beta.zeta0, beta.kappa0);

    // volatility driver
    let omega = reconstruct_omega(&series, vol, OmegaWeighting::Ordinary)?;
    let truth_omega = generator.omega0_sample(t);
    println!(
        "corr(reconstructed Omega_0, truth): from residuals {:.3}, from factors {:.3}",
        correlation(&omega.residual.omega0, &truth_omega),
        correlation(&omega.factor.omega0, &truth_omega)
    );
    Ok(())
}
