//! Volatility calibration on synthetic data with known parameters.

use nalgebra::DMatrix;
use nested_factor::data::standardize;
use nested_factor::linalg::cosine;
use nested_factor::linfactor::{extract_series, LinearFactorModel};
use nested_factor::nlcorr::{default_p_grid, estimate_nlcorr, NonlinCorrSet};
use nested_factor::simengine::{Generator, GeneratorSpec};
use nested_factor::volcal::{
    calibrate_factor_vol, calibrate_residual_vol, model_nlcorr, ResidualFit, VolCalibration, VolModel,
};

fn sector_weights(m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |k, i| match k {
        0 => 0.4,
        _ if i % (m - 1) == k - 1 => 0.3 + 0.4 * i as f64 / n as f64,
        _ => 0.0,
    })
}

#[test]
fn gaussian_driver_round_trip() {
    let (m, n, t) = (10, 50, 10_000);
    let linear = LinearFactorModel::new(sector_weights(m, n)).unwrap();
    let truth = VolModel::uniform(m, n, 0.4, 0.3, 0.2, 0.2, 0.0, 0.0);
    let spec = GeneratorSpec::new(linear.clone(), truth.clone(), t, 11).unwrap();
    let panel = standardize(&Generator::new(&spec).unwrap().simulate().unwrap()).unwrap();
    let series = extract_series(&panel, &linear).unwrap();
    let set = estimate_nlcorr(&series, &default_p_grid()).unwrap();

    let opts = VolCalibration::default();
    let (partial, report) = calibrate_factor_vol(&set, 1, &opts).unwrap();
    assert!(report.loss <= report.initial_loss);
    let cos_a = cosine(partial.a.as_slice(), truth.a.as_slice());
    assert!(cos_a > 0.95, "cos(A) = {cos_a}");
    assert!(partial.zeta0.abs() <= 0.3, "zeta0 = {}", partial.zeta0);
    assert!(partial.kappa0.abs() <= 0.3, "kappa0 = {}", partial.kappa0);

    let p_star = set.p_grid[3];
    let (full, report) = calibrate_residual_vol(&set, &partial, p_star, ResidualFit::Joint, &opts).unwrap();
    assert!(report.loss <= report.initial_loss);
    let cos_b = cosine(full.b.as_slice(), truth.b.as_slice());
    assert!(cos_b > 0.95, "cos(B) = {cos_b}");
}

#[test]
fn two_modes_stay_nearly_orthogonal() {
    let (m, n) = (6, 4);
    // orthogonal modes: sum_k A_k0 A_k1 = 0
    let a = DMatrix::from_fn(m, 2, |k, j| if j == 0 { 0.35 + 0.02 * k as f64 } else if k < 3 { 0.25 } else { -0.25 });
    let a1_mean: f64 = (0..m).map(|k| a[(k, 0)] * a[(k, 1)]).sum();
    assert!(a1_mean.abs() > 0.0);
    let mut a = a;
    // remove the projection of mode 1 on mode 0
    let a0: Vec<f64> = a.column(0).iter().copied().collect();
    let norm2: f64 = a0.iter().map(|v| v * v).sum();
    for k in 0..m {
        a[(k, 1)] -= a1_mean / norm2 * a0[k];
    }
    let truth = VolModel::new(a, DMatrix::zeros(n, 2), vec![0.2; m], vec![0.1; n], -0.4, -0.6).unwrap();
    let grid = default_p_grid();
    let mut set = NonlinCorrSet {
        p_grid: grid.clone(),
        cff: vec![],
        crr: vec![],
        cfr: vec![],
        clamped: 0,
    };
    for &p in &grid {
        let o = model_nlcorr(&truth, p).unwrap();
        set.cff.push(o.ff);
        set.crr.push(o.rr);
        set.cfr.push(o.fr);
    }
    let (fit, _) = calibrate_factor_vol(&set, 2, &VolCalibration::default()).unwrap();
    let (c0, c1) = (fit.a.column(0), fit.a.column(1));
    let overlap = c0.dot(&c1).abs();
    assert!(overlap <= 0.05 * c0.norm() * c1.norm(), "overlap {overlap}");
}
