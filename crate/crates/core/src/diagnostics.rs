//! Copula and quadratic-correlation diagnostics.
//!
//! Copulas are evaluated on pseudo-observations: midranks divided by `T + 1`.
//! Per-pair quantities for a whole panel are computed as gram products of
//! indicator matrices, so every pair shares one pass over the data.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bvn::gaussian_copula;
use crate::data::{fmt_value, write_file};
use crate::error::{Error, Result};
use crate::linfactor::{sample_correlation, LinearFactorModel};
use crate::simengine::{Generator, OmegaLaw};
use crate::volcal::{phi0, VolModel};

const MIN_LENGTH: usize = 10;

/// Midranks of `x` divided by `T + 1`.
pub fn pseudo_obs(x: &[f64]) -> Vec<f64> {
    let t = x.len();
    let mut idx: Vec<usize> = (0..t).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; t];
    let mut i = 0;
    while i < t {
        let mut j = i;
        while j + 1 < t && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            out[k] = mid / (t + 1) as f64;
        }
        i = j + 1;
    }
    out
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < MIN_LENGTH {
        return Err(Error::Dimension(format!(
            "copula estimates need at least {MIN_LENGTH} dates, got {}",
            x.len()
        )));
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// Empirical copula `C(u, v)`: fraction of dates with both pseudo-observations
/// at or below `(u, v)`.
pub fn empirical_copula_point(x: &[f64], y: &[f64], u: f64, v: f64) -> Result<f64> {
    check_pair(x, y)?;
    check_unit("u", u)?;
    check_unit("v", v)?;
    let px = pseudo_obs(x);
    let py = pseudo_obs(y);
    let hits = px.iter().zip(&py).filter(|(a, b)| **a <= u && **b <= v).count();
    Ok(hits as f64 / x.len() as f64)
}

/// `cos(2 pi C(1/2, 1/2))`. Equals `-rho` for elliptical pairs; downstream
/// code only uses `|rho / rho_B|`.
pub fn rho_blomqvist(medial: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&medial) {
        return Err(Error::Domain(format!("medial point {medial} outside [0, 1/2]")));
    }
    Ok((2.0 * std::f64::consts::PI * medial).cos())
}

/// Medial point `1/4 + asin(rho) / (2 pi)` of an elliptical pair.
pub fn elliptical_medial(rho: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("correlation {rho} outside [-1, 1]")));
    }
    Ok(0.25 + rho.asin() / (2.0 * std::f64::consts::PI))
}

/// `ln |rho / rho_B|`.
pub fn log_ratio(rho: f64, rho_b: f64) -> f64 {
    (rho / rho_b).abs().ln()
}

/// 101 equally spaced points in [0.01, 0.99].
pub fn default_diagonal_grid() -> Vec<f64> {
    (0..101).map(|i| 0.01 + 0.98 * i as f64 / 100.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain("empty diagonal grid".into()));
    }
    grid.iter().try_for_each(|&p| check_unit("grid point", p))
}

/// Departures of the diagonal `C(p, p)` and anti-diagonal `C(p, 1 - p)` from
/// the Gaussian copula at the pair's linear correlation, over `p (1 - p)`.
pub fn copula_diagonals(x: &[f64], y: &[f64], grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(x, y)?;
    check_grid(grid)?;
    let rho = crate::linalg::correlation(x, y);
    let px = pseudo_obs(x);
    let py = pseudo_obs(y);
    let t = x.len() as f64;
    let count = |u: f64, v: f64| px.iter().zip(&py).filter(|(a, b)| **a <= u && **b <= v).count() as f64 / t;
    let mut d = Vec::with_capacity(grid.len());
    let mut a = Vec::with_capacity(grid.len());
    for &p in grid {
        let w = p * (1.0 - p);
        d.push((count(p, p) - gaussian_copula(p, p, rho)) / w);
        a.push((count(p, 1.0 - p) - gaussian_copula(p, 1.0 - p, rho)) / w);
    }
    Ok((d, a))
}

/// Per-pair copula diagnostics of a panel, pairs `(i, j)` with `i < j` in
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaDiagnostics {
    pub pairs: Vec<(usize, usize)>,
    pub rho_lin: Vec<f64>,
    pub medial: Vec<f64>,
    pub rho_b: Vec<f64>,
    pub grid: Vec<f64>,
    /// `diag_delta[pair][grid point]`.
    pub diag_delta: Vec<Vec<f64>>,
    pub antidiag_delta: Vec<Vec<f64>>,
}

impl CopulaDiagnostics {
    pub fn log_ratios(&self) -> Vec<f64> {
        self.rho_lin.iter().zip(&self.rho_b).map(|(r, b)| log_ratio(*r, *b)).collect()
    }
}

fn indicator(u: &DMatrix<f64>, level: f64) -> DMatrix<f64> {
    u.map(|v| if v <= level { 1.0 } else { 0.0 })
}

/// Copula diagnostics for every pair of columns. An empty `grid` skips the
/// diagonal curves.
pub fn copula_diagnostics(returns: &DMatrix<f64>, grid: &[f64]) -> Result<CopulaDiagnostics> {
    let (t, n) = returns.shape();
    if t < MIN_LENGTH || n < 2 {
        return Err(Error::Dimension(format!("copula diagnostics need T >= {MIN_LENGTH} and N >= 2")));
    }
    if !grid.is_empty() {
        check_grid(grid)?;
    }
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| pseudo_obs(returns.column(j).as_slice()))
        .collect();
    let u = DMatrix::from_fn(t, n, |r, c| cols[c][r]);
    let rho = sample_correlation(returns);
    let half = indicator(&u, 0.5);
    let c_half = half.tr_mul(&half) / t as f64;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let rho_lin: Vec<f64> = pairs.iter().map(|&(i, j)| rho[(i, j)]).collect();
    let medial: Vec<f64> = pairs.iter().map(|&(i, j)| c_half[(i, j)]).collect();
    let rho_b = medial.iter().map(|&m| rho_blomqvist(m)).collect::<Result<Vec<_>>>()?;

    let per_point: Vec<(Vec<f64>, Vec<f64>)> = grid
        .par_iter()
        .map(|&p| {
            let lo = indicator(&u, p);
            let hi = indicator(&u, 1.0 - p);
            let cd = lo.tr_mul(&lo) / t as f64;
            let ca = lo.tr_mul(&hi) / t as f64;
            let w = p * (1.0 - p);
            let mut d = Vec::with_capacity(pairs.len());
            let mut a = Vec::with_capacity(pairs.len());
            for &(i, j) in &pairs {
                let r = rho[(i, j)];
                d.push((cd[(i, j)] - gaussian_copula(p, p, r)) / w);
                a.push((ca[(i, j)] - gaussian_copula(p, 1.0 - p, r)) / w);
            }
            (d, a)
        })
        .collect();
    let diag_delta = (0..pairs.len())
        .map(|k| per_point.iter().map(|(d, _)| d[k]).collect())
        .collect();
    let antidiag_delta = (0..pairs.len())
        .map(|k| per_point.iter().map(|(_, a)| a[k]).collect())
        .collect();
    Ok(CopulaDiagnostics {
        pairs,
        rho_lin,
        medial,
        rho_b,
        grid: grid.to_vec(),
        diag_delta,
        antidiag_delta,
    })
}

/// One bin of a curve binned by linear correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_rho: f64,
    pub mean: f64,
    /// Standard error of `mean`; NaN for single-pair bins.
    pub se: f64,
}

/// Equally spaced bin edges of width `width` covering `[lo, hi]`.
pub fn bin_edges(lo: f64, hi: f64, width: f64) -> Vec<f64> {
    let n = ((hi - lo) / width).round() as usize;
    (0..=n).map(|i| lo + width * i as f64).collect()
}

/// Default binning of the `ln |rho / rho_B|` curve: width 0.05 on [-1, 1].
pub fn default_bin_edges() -> Vec<f64> {
    bin_edges(-1.0, 1.0, 0.05)
}

/// Averages `values` within bins of `rho`; empty bins and non-finite values
/// are skipped.
pub fn bin_by_rho(rho: &[f64], values: &[f64], edges: &[f64]) -> Vec<Bin> {
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let last = hi == *edges.last().unwrap();
        let sel: Vec<(f64, f64)> = rho
            .iter()
            .zip(values)
            .filter(|(r, v)| **r >= lo && (**r < hi || (last && **r <= hi)) && v.is_finite())
            .map(|(r, v)| (*r, *v))
            .collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        let mean = sel.iter().map(|p| p.1).sum::<f64>() / n;
        let se = if sel.len() > 1 {
            (sel.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        out.push(Bin {
            lower: lo,
            upper: hi,
            count: sel.len(),
            mean_rho: sel.iter().map(|p| p.0).sum::<f64>() / n,
            mean,
            se,
        });
    }
    out
}

/// Binned `ln |rho / rho_B|` against `rho`.
pub fn log_ratio_curve(diag: &CopulaDiagnostics, edges: &[f64]) -> Vec<Bin> {
    bin_by_rho(&diag.rho_lin, &diag.log_ratios(), edges)
}

/// Bin-averaged diagonal and anti-diagonal curves.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDiagonals {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub diag: Vec<f64>,
    pub antidiag: Vec<f64>,
}

pub fn binned_diagonals(diag: &CopulaDiagnostics, edges: &[f64]) -> Vec<BinnedDiagonals> {
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let sel: Vec<usize> = (0..diag.pairs.len())
            .filter(|&k| diag.rho_lin[k] >= w[0] && diag.rho_lin[k] < w[1])
            .collect();
        if sel.is_empty() {
            continue;
        }
        let avg = |curves: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..diag.grid.len())
                .map(|g| sel.iter().map(|&k| curves[k][g]).sum::<f64>() / sel.len() as f64)
                .collect()
        };
        out.push(BinnedDiagonals {
            lower: w[0],
            upper: w[1],
            count: sel.len(),
            diag: avg(&diag.diag_delta),
            antidiag: avg(&diag.antidiag_delta),
        });
    }
    out
}

fn quadratic_corr_with(
    linear: &LinearFactorModel,
    vol: &VolModel,
    i: usize,
    j: usize,
    ln_phi: impl Fn(f64, f64) -> f64,
) -> Result<f64> {
    if vol.n_modes() != 1 {
        return Err(Error::Dimension("the quadratic-correlation formula needs one volatility mode".into()));
    }
    if linear.n_factors() != vol.n_factors() || linear.n_assets() != vol.n_assets() {
        return Err(Error::Dimension("linear and volatility models disagree".into()));
    }
    let n = linear.n_assets();
    if i >= n || j >= n {
        return Err(Error::Dimension(format!("asset index out of range for N = {n}")));
    }
    let w = linear.weights();
    let v = linear.residual_variances();
    let a = |k: usize| vol.a[(k, 0)];
    let b = |k: usize| vol.b[(k, 0)];
    let m = linear.n_factors();
    let same = if i == j { 3.0 } else { 1.0 };
    let mut total = 0.0;
    for k in 0..m {
        for l in 0..m {
            let mut term = (w[(k, i)].powi(2) * w[(l, j)].powi(2)
                + 2.0 * w[(k, i)] * w[(k, j)] * w[(l, i)] * w[(l, j)])
                * ln_phi(a(k), a(l)).exp();
            if k == l {
                term *= (4.0 * vol.s[k].powi(2)).exp();
            }
            total += term;
        }
    }
    for k in 0..m {
        total += same * v[i] * w[(k, j)].powi(2) * ln_phi(a(k), b(i)).exp();
        total += same * v[j] * w[(k, i)].powi(2) * ln_phi(a(k), b(j)).exp();
    }
    let mut rr = v[i] * v[j] * ln_phi(b(i), b(j)).exp();
    if i == j {
        rr *= 3.0 * (4.0 * vol.s_tilde[i].powi(2)).exp();
    }
    Ok(total + rr)
}

/// Analytic `E[r_i^2 r_j^2]` with the cumulant-expansion MGF ratio
/// `Phi_0(2a, 2b) = exp(4 phi0(a, b; 2))`.
pub fn quadratic_corr_model(linear: &LinearFactorModel, vol: &VolModel, i: usize, j: usize) -> Result<f64> {
    quadratic_corr_with(linear, vol, i, j, |a, b| 4.0 * phi0(a, b, 2.0, vol.zeta0, vol.kappa0))
}

/// Same as [`quadratic_corr_model`] but with the exact MGF of the sampling
/// law of `Omega_0`.
pub fn quadratic_corr_exact(
    linear: &LinearFactorModel,
    vol: &VolModel,
    law: &OmegaLaw,
    i: usize,
    j: usize,
) -> Result<f64> {
    quadratic_corr_with(linear, vol, i, j, |a, b| {
        law.ln_mgf(2.0 * (a + b)) - law.ln_mgf(2.0 * a) - law.ln_mgf(2.0 * b)
    })
}

/// Analytic quadratic correlations for every pair, as an N×N matrix.
pub fn quadratic_corr_matrix(linear: &LinearFactorModel, vol: &VolModel) -> Result<DMatrix<f64>> {
    let n = linear.n_assets();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = quadratic_corr_model(linear, vol, i, j)?;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Sample `E[r_i^2 r_j^2]` of a return matrix.
pub fn quadratic_corr_sample(returns: &DMatrix<f64>) -> DMatrix<f64> {
    let sq = returns.map(|x| x * x);
    sq.tr_mul(&sq) / returns.nrows() as f64
}

/// Monte-Carlo `E[r_i^2 r_j^2]` and its standard errors over `n_samples`
/// dates of `generator`.
pub fn quadratic_moments_mc(generator: &Generator, n_samples: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    const BLOCK: usize = 8192;
    let n = generator.spec().linear.n_assets();
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n_samples.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let r = generator.draw_block(b * BLOCK, ((b + 1) * BLOCK).min(n_samples));
            let sq = r.map(|x| x * x);
            let mut s1 = DMatrix::zeros(n, n);
            let mut s2 = DMatrix::zeros(n, n);
            for row in sq.row_iter() {
                for i in 0..n {
                    for j in 0..n {
                        let p = row[i] * row[j];
                        s1[(i, j)] += p;
                        s2[(i, j)] += p * p;
                    }
                }
            }
            (s1, s2)
        })
        .collect();
    let mut s1 = DMatrix::zeros(n, n);
    let mut s2 = DMatrix::zeros(n, n);
    for (a, b) in &partials {
        s1 += a;
        s2 += b;
    }
    let t = n_samples as f64;
    let mean = s1 / t;
    let se = DMatrix::from_fn(n, n, |i, j| ((s2[(i, j)] / t - mean[(i, j)].powi(2)).max(0.0) / t).sqrt());
    (mean, se)
}

/// Pseudo-elliptical panel `r_i = sigma * eps_i`: Gaussian `eps` with
/// correlation `corr` and a common log-normal amplitude with log-sd
/// `log_vol_sd`, normalized to unit variance.
pub fn pseudo_elliptical_panel(corr: &DMatrix<f64>, log_vol_sd: f64, t: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = corr.nrows();
    let chol = corr
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singularity("correlation is not positive definite".into()))?;
    let l = chol.l();
    let rows: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|date| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(date as u64);
            let omega: f64 = rng.sample(StandardNormal);
            let sigma = (log_vol_sd * omega - log_vol_sd * log_vol_sd).exp();
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            (0..n)
                .map(|i| sigma * (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>())
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(t, n, |r, c| rows[r][c]))
}

pub fn write_pairs_csv(path: &Path, diag: &CopulaDiagnostics, ids: &[String], precision: Option<usize>) -> Result<()> {
    let mut out = String::from("asset_i,asset_j,rho,medial,rho_b,log_ratio\n");
    for (k, &(i, j)) in diag.pairs.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            ids[i],
            ids[j],
            fmt_value(diag.rho_lin[k], precision),
            fmt_value(diag.medial[k], precision),
            fmt_value(diag.rho_b[k], precision),
            fmt_value(log_ratio(diag.rho_lin[k], diag.rho_b[k]), precision)
        ));
    }
    write_file(path, out.as_bytes())
}

pub fn write_curve_csv(path: &Path, bins: &[Bin], precision: Option<usize>) -> Result<()> {
    let mut out = String::from("rho_lower,rho_upper,count,mean_rho,mean,se\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_value(b.lower, precision),
            fmt_value(b.upper, precision),
            b.count,
            fmt_value(b.mean_rho, precision),
            fmt_value(b.mean, precision),
            fmt_value(b.se, precision)
        ));
    }
    write_file(path, out.as_bytes())
}

/// One row per (bin, grid point).
pub fn write_diagonals_csv(
    path: &Path,
    grid: &[f64],
    bins: &[BinnedDiagonals],
    precision: Option<usize>,
) -> Result<()> {
    let mut out = String::from("rho_lower,rho_upper,count,p,delta_diag,delta_antidiag\n");
    for b in bins {
        for (g, p) in grid.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_value(b.lower, precision),
                fmt_value(b.upper, precision),
                b.count,
                fmt_value(*p, precision),
                fmt_value(b.diag[g], precision),
                fmt_value(b.antidiag[g], precision)
            ));
        }
    }
    write_file(path, out.as_bytes())
}
