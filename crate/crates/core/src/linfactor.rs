//! Linear factor layer: `r_i = sum_k W_ki f_k + e_i` with unit-variance,
//! mutually uncorrelated factors and residuals of variance `1 - sum_k W_ki^2`.
//!
//! Weights are fitted to the off-diagonal part of the sample correlation
//! matrix, starting from the principal-component solution; factor and
//! residual series are then recovered by a date-by-date GLS regression.

use nalgebra::{DMatrix, DVector};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::{self, LbfgsOptions, Objective, OptimReport};

/// Floor applied to residual variances when they are used as GLS weights.
pub const RESIDUAL_VARIANCE_FLOOR: f64 = 1e-6;

/// M×N exposure matrix of N assets to M linear factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFactorModel {
    weights: DMatrix<f64>,
}

impl LinearFactorModel {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Dimension("empty weight matrix".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("non-finite factor weight".into()));
        }
        Ok(LinearFactorModel { weights })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn n_factors(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.weights.ncols()
    }

    /// `1 - sum_k W_ki^2` for each asset (not floored).
    pub fn residual_variances(&self) -> Vec<f64> {
        self.weights
            .column_iter()
            .map(|c| 1.0 - c.norm_squared())
            .collect()
    }

    /// Predicted correlation: `(W^T W)_ij` off the diagonal, exactly 1 on it.
    pub fn model_correlation(&self) -> DMatrix<f64> {
        let mut c = self.weights.tr_mul(&self.weights);
        let n = c.nrows();
        for i in 0..n {
            c[(i, i)] = 1.0;
            for j in 0..i {
                let v = c[(j, i)];
                c[(i, j)] = v;
            }
        }
        c
    }
}

/// T×M factor series and T×N residual series.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSeries {
    pub factors: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
}

impl FactorSeries {
    pub fn n_dates(&self) -> usize {
        self.factors.nrows()
    }
}

/// Sample correlation matrix of a T×N matrix (population moments, centered).
pub fn sample_correlation(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.nrows() as f64;
    let mut z = x.clone();
    for mut col in z.column_iter_mut() {
        let mean = col.sum() / t;
        col.iter_mut().for_each(|v| *v -= mean);
        let sd = (col.norm_squared() / t).sqrt();
        if sd > 0.0 {
            col.iter_mut().for_each(|v| *v /= sd);
        }
    }
    let mut c = linalg::second_moment(&z);
    for i in 0..c.nrows() {
        c[(i, i)] = 1.0;
    }
    c
}

/// Principal-component weights `Lambda_M^{1/2} V_M^T` of a correlation matrix.
pub fn pca_prior_from_correlation(corr: &DMatrix<f64>, m: usize) -> Result<LinearFactorModel> {
    let n = corr.nrows();
    if m == 0 || m > n {
        return Err(Error::Rank(format!("{m} factors requested for {n} assets")));
    }
    let eig = linalg::sym_eigen(corr);
    let mut w = DMatrix::zeros(m, n);
    for k in 0..m {
        let scale = eig.values[k].max(0.0).sqrt();
        for i in 0..n {
            w[(k, i)] = scale * eig.vectors[(i, k)];
        }
    }
    LinearFactorModel::new(w)
}

/// PCA identification of an `m`-factor model on the panel's sample correlation.
pub fn pca_prior(panel: &ReturnPanel, m: usize) -> Result<LinearFactorModel> {
    pca_prior_from_correlation(&sample_correlation(panel.returns()), m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightCalibration {
    pub lbfgs: LbfgsOptions,
    /// Strength of the quadratic penalty on `sum_k W_ki^2 > 1`.
    pub barrier: f64,
}

impl Default for WeightCalibration {
    fn default() -> Self {
        WeightCalibration {
            lbfgs: LbfgsOptions::default(),
            barrier: 1e4,
        }
    }
}

/// Off-diagonal fitting loss for the weights, plus the residual-variance barrier.
#[derive(Debug, Clone)]
pub struct OffDiagonalLoss {
    target: DMatrix<f64>,
    m: usize,
    barrier: f64,
}

impl OffDiagonalLoss {
    pub fn new(target: DMatrix<f64>, m: usize, barrier: f64) -> Self {
        OffDiagonalLoss { target, m, barrier }
    }

    /// Squared Frobenius norm of the off-diagonal part of `target - W^T W`.
    pub fn off_diagonal(&self, w: &DMatrix<f64>) -> f64 {
        let g = w.tr_mul(w);
        let mut loss = 0.0;
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                if i != j {
                    let d = self.target[(i, j)] - g[(i, j)];
                    loss += d * d;
                }
            }
        }
        loss
    }
}

impl Objective for OffDiagonalLoss {
    fn dim(&self) -> usize {
        self.m * self.target.nrows()
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.target.nrows();
        let w = DMatrix::from_column_slice(self.m, n, x);
        let mut d = &self.target - w.tr_mul(&w);
        for i in 0..n {
            d[(i, i)] = 0.0;
        }
        let mut loss = d.norm_squared();
        let mut g = &w * &d * -4.0;
        for (i, col) in w.column_iter().enumerate() {
            let excess = col.norm_squared() - 1.0;
            if excess > 0.0 {
                loss += self.barrier * excess * excess;
                for k in 0..self.m {
                    g[(k, i)] += 4.0 * self.barrier * excess * col[k];
                }
            }
        }
        grad.copy_from_slice(g.as_slice());
        loss
    }
}

/// Weights fitted to a given correlation matrix, starting from `start`
/// (the PCA prior when `None`).
pub fn calibrate_weights_from_correlation(
    corr: &DMatrix<f64>,
    m: usize,
    start: Option<&LinearFactorModel>,
    opts: &WeightCalibration,
) -> Result<(LinearFactorModel, OptimReport)> {
    let prior = pca_prior_from_correlation(corr, m)?;
    let init = match start {
        Some(s) if s.n_factors() == m && s.n_assets() == corr.nrows() => s.clone(),
        Some(_) => {
            return Err(Error::Dimension(
                "warm start does not match the requested model size".into(),
            ))
        }
        None => prior.clone(),
    };
    let objective = OffDiagonalLoss::new(corr.clone(), m, opts.barrier);
    let (x, report) = optim::minimize(&objective, init.weights.as_slice(), opts.lbfgs);
    let mut w = DMatrix::from_column_slice(m, corr.nrows(), &x);
    for mut col in w.column_iter_mut() {
        let norm = col.norm();
        if norm > 1.0 {
            col /= norm;
        }
    }
    let prior_loss = objective.off_diagonal(&prior.weights);
    let init_loss = objective.off_diagonal(&init.weights);
    let fitted = LinearFactorModel::new(w)?;
    let fitted_loss = objective.off_diagonal(&fitted.weights);
    let (best, loss) = if fitted_loss <= init_loss.min(prior_loss) {
        (fitted, fitted_loss)
    } else if init_loss <= prior_loss {
        (init, init_loss)
    } else {
        (prior, prior_loss)
    };
    Ok((best, OptimReport { loss, ..report }))
}

/// Fits `m`-factor weights to the off-diagonal sample correlations of the panel.
pub fn calibrate_weights(
    panel: &ReturnPanel,
    m: usize,
    opts: &WeightCalibration,
) -> Result<(LinearFactorModel, OptimReport)> {
    calibrate_weights_from_correlation(&sample_correlation(panel.returns()), m, None, opts)
}

/// GLS projection matrix `(W V^-1 W^T)^-1 W V^-1` (M×N).
fn gls_projector(model: &LinearFactorModel) -> Result<DMatrix<f64>> {
    let w = model.weights();
    let inv_v: Vec<f64> = model
        .residual_variances()
        .iter()
        .map(|v| 1.0 / v.max(RESIDUAL_VARIANCE_FLOOR))
        .collect();
    let mut w_scaled = w.clone();
    for (i, mut col) in w_scaled.column_iter_mut().enumerate() {
        col *= inv_v[i];
    }
    let normal = &w_scaled * w.transpose();
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Singularity("W diag(1/v) W^T is not positive definite".into()))?;
    Ok(chol.solve(&w_scaled))
}

/// Date-by-date GLS regression of returns on the weights.
/// Returns satisfy `R = F W + E` by construction.
pub fn extract_series_from_matrix(
    returns: &DMatrix<f64>,
    model: &LinearFactorModel,
) -> Result<FactorSeries> {
    if returns.ncols() != model.n_assets() {
        return Err(Error::Dimension(format!(
            "panel has {} assets, model {}",
            returns.ncols(),
            model.n_assets()
        )));
    }
    let proj = gls_projector(model)?;
    let factors = returns * proj.transpose();
    let residuals = returns - &factors * model.weights();
    Ok(FactorSeries { factors, residuals })
}

pub fn extract_series(panel: &ReturnPanel, model: &LinearFactorModel) -> Result<FactorSeries> {
    extract_series_from_matrix(panel.returns(), model)
}

fn orthonormal_row_basis(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = w.nrows();
    let qr = w.transpose().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-12 * scale) {
        return Err(Error::Rank(format!(
            "factor weights span fewer than {m} dimensions"
        )));
    }
    Ok(qr.q().columns(0, m).into_owned())
}

/// Subspace distance `-(1/M) ln |det(Q_model^T Q_prior)|` between the row
/// spaces of two weight matrices, each orthonormalized first.
pub fn subspace_distance(model: &LinearFactorModel, prior: &LinearFactorModel) -> Result<f64> {
    if model.weights.shape() != prior.weights.shape() {
        return Err(Error::Dimension(format!(
            "models of shape {:?} and {:?}",
            model.weights.shape(),
            prior.weights.shape()
        )));
    }
    let m = model.n_factors() as f64;
    let q_model = orthonormal_row_basis(&model.weights)?;
    let q_prior = orthonormal_row_basis(&prior.weights)?;
    let overlap = q_model.tr_mul(&q_prior);
    let det = overlap.determinant().abs();
    if det == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((-det.ln() / m).max(0.0))
}

/// Column of factor loadings for asset `i`.
pub fn exposures(model: &LinearFactorModel, i: usize) -> DVector<f64> {
    model.weights.column(i).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn corr2(rho: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])
    }

    #[test]
    fn pca_prior_two_assets() {
        let w = pca_prior_from_correlation(&corr2(0.8), 1).unwrap();
        let expected = (1.8f64).sqrt() / 2f64.sqrt();
        assert!((w.weights()[(0, 0)] - expected).abs() < 1e-12);
        assert!((w.weights()[(0, 1)] - expected).abs() < 1e-12);
        assert!((expected - 0.9487).abs() < 1e-4);

        let w0 = pca_prior_from_correlation(&corr2(0.0), 1).unwrap();
        let row: Vec<f64> = w0.weights().iter().copied().collect();
        assert!((row[0].abs() - 1.0).abs() < 1e-12 && row[1].abs() < 1e-12
            || (row[1].abs() - 1.0).abs() < 1e-12 && row[0].abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pca_prior_equicorrelated_is_uniform() {
        let n = 6;
        let c = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.3 });
        let w = pca_prior_from_correlation(&c, 1).unwrap();
        // Perron vector 1/sqrt(n), eigenvalue 1 + (n-1) rho.
        let expected = ((1.0 + 5.0 * 0.3) / n as f64).sqrt();
        for i in 0..n {
            assert!((w.weights()[(0, i)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_prior_rank_error() {
        assert!(matches!(
            pca_prior_from_correlation(&corr2(0.1), 3),
            Err(Error::Rank(_))
        ));
    }

    #[test]
    fn model_correlation_examples() {
        let zero = LinearFactorModel::new(DMatrix::zeros(2, 3)).unwrap();
        assert_eq!(zero.model_correlation(), DMatrix::identity(3, 3));
        let one = LinearFactorModel::new(DMatrix::from_row_slice(1, 2, &[0.6, 0.5])).unwrap();
        let c = one.model_correlation();
        assert_eq!(c[(0, 1)], 0.3);
        assert_eq!(c[(1, 0)], 0.3);
        assert_eq!(c[(0, 0)], 1.0);
    }

    #[test]
    fn full_rank_calibration_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(200, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let corr = sample_correlation(&x);
        let (w, rep) =
            calibrate_weights_from_correlation(&corr, 4, None, &WeightCalibration::default())
                .unwrap();
        assert!(rep.loss < 1e-20);
        let g = w.model_correlation();
        assert!((g - &corr).abs().max() < 1e-10);
    }

    #[test]
    fn gls_extraction_single_asset_factor() {
        let n = 4;
        let mut w = DMatrix::zeros(1, n);
        w[(0, 0)] = 1.0;
        let model = LinearFactorModel::new(w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = DMatrix::from_fn(10, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = extract_series_from_matrix(&r, &model).unwrap();
        for t in 0..10 {
            assert!((s.factors[(t, 0)] - r[(t, 0)]).abs() < 1e-12);
            assert!(s.residuals[(t, 0)].abs() < 1e-12);
        }
    }

    #[test]
    fn singular_gls_system() {
        let model = LinearFactorModel::new(DMatrix::zeros(2, 3)).unwrap();
        let r = DMatrix::zeros(5, 3);
        assert!(matches!(
            extract_series_from_matrix(&r, &model),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn subspace_distance_limits() {
        let c = DMatrix::from_fn(5, 5, |i, j| if i == j { 1.0 } else { 0.2 + 0.05 * (i + j) as f64 });
        let prior = pca_prior_from_correlation(&c, 2).unwrap();
        assert!(subspace_distance(&prior, &prior).unwrap().abs() < 1e-12);
        let a = LinearFactorModel::new(DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 + if i == j { 3.0 } else { 0.0 })).unwrap();
        let full = pca_prior_from_correlation(&c, 5).unwrap();
        assert!(subspace_distance(&a, &full).unwrap().abs() < 1e-10);
        let degenerate = LinearFactorModel::new(DMatrix::from_row_slice(2, 5, &[1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(matches!(subspace_distance(&degenerate, &prior), Err(Error::Rank(_))));
    }
}
