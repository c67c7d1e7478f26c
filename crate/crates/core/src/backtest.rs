//! In-sample / out-of-sample risk of Markowitz portfolios built from cleaned
//! correlation matrices, over non-overlapping sliding windows.
//!
//! Dates are 1-indexed as `tau`: the estimation window is
//! `[tau - T_is, tau - 1]`, the predictor `g` comes from date `tau`, and the
//! control window is `[tau + 1, tau + T_os]`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_value, write_file, ReturnPanel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::linfactor::{self, LinearFactorModel, WeightCalibration};
use crate::simengine::{model_implied_abs_corr, GeneratorSpec};
use crate::svg::{Plot, Style};
use crate::volcal::{calibrate_nested, NestedVolOptions};

/// Condition number above which the ridge is added before inversion.
pub const MAX_CONDITION: f64 = 1e12;
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Track {
    /// Portfolios of returns.
    Linear,
    /// Portfolios of centered, normalized absolute returns.
    Absolute,
}

impl std::str::FromStr for Track {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Track::Linear),
            "absolute" => Ok(Track::Absolute),
            other => Err(Error::Config(format!("unknown track `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CleaningScheme {
    Empirical,
    LedoitWolf { alpha: f64 },
    Clipped { m: usize },
    /// Off-diagonal fit of an M-factor model to the window correlation.
    MultiFactorLinear { m: usize },
    /// Absolute correlations of the M-factor model with Gaussian factors and residuals.
    GaussianFactor { m: usize },
    /// Monte-Carlo absolute correlations of the calibrated nested model.
    NestedFactor { m: usize, k: usize },
}

impl CleaningScheme {
    pub fn name(&self) -> &'static str {
        match self {
            CleaningScheme::Empirical => "empirical",
            CleaningScheme::LedoitWolf { .. } => "ledoit-wolf",
            CleaningScheme::Clipped { .. } => "clipped",
            CleaningScheme::MultiFactorLinear { .. } => "multifactor",
            CleaningScheme::GaussianFactor { .. } => "gaussian-factor",
            CleaningScheme::NestedFactor { .. } => "nested-factor",
        }
    }

    /// Scheme parameter as printed in reports (`alpha` or `M`).
    pub fn parameter(&self) -> String {
        match *self {
            CleaningScheme::Empirical => String::new(),
            CleaningScheme::LedoitWolf { alpha } => format!("{alpha}"),
            CleaningScheme::Clipped { m }
            | CleaningScheme::MultiFactorLinear { m }
            | CleaningScheme::GaussianFactor { m } => m.to_string(),
            CleaningScheme::NestedFactor { m, k } => format!("{m}/{k}"),
        }
    }

    /// Control parameter of the IS-vs-OS curves: `alpha`, or `M / N`.
    pub fn control(&self, n: usize) -> f64 {
        match *self {
            CleaningScheme::Empirical => 1.0,
            CleaningScheme::LedoitWolf { alpha } => alpha,
            CleaningScheme::Clipped { m }
            | CleaningScheme::MultiFactorLinear { m }
            | CleaningScheme::GaussianFactor { m }
            | CleaningScheme::NestedFactor { m, .. } => m as f64 / n as f64,
        }
    }

    pub fn validate(&self, n: usize, track: Track) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            CleaningScheme::Empirical => Ok(()),
            CleaningScheme::LedoitWolf { alpha } if !(0.0..=1.0).contains(&alpha) => {
                bad(format!("Ledoit-Wolf alpha {alpha} outside [0, 1]"))
            }
            CleaningScheme::LedoitWolf { .. } => Ok(()),
            CleaningScheme::Clipped { m } | CleaningScheme::MultiFactorLinear { m } | CleaningScheme::GaussianFactor { m }
                if m == 0 || m > n =>
            {
                bad(format!("{} needs 1 <= M <= N = {n}, got {m}", self.name()))
            }
            CleaningScheme::NestedFactor { m, .. } if m == 0 || m > n => {
                bad(format!("nested-factor needs 1 <= M <= N = {n}, got {m}"))
            }
            CleaningScheme::NestedFactor { k, .. } if !(k == 1 || k == 2) => {
                bad(format!("nested-factor needs K in {{1, 2}}, got {k}"))
            }
            CleaningScheme::MultiFactorLinear { .. } if track == Track::Absolute => {
                bad("multifactor applies to the linear track".into())
            }
            CleaningScheme::GaussianFactor { .. } | CleaningScheme::NestedFactor { .. } if track == Track::Linear => {
                bad(format!("{} applies to the absolute track", self.name()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CleaningScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.parameter();
        if p.is_empty() {
            write!(f, "{}", self.name())
        } else {
            write!(f, "{}({p})", self.name())
        }
    }
}

impl std::str::FromStr for CleaningScheme {
    type Err = Error;
    /// `empirical`, `ledoit-wolf:0.5`, `clipped:10`, `multifactor:5`,
    /// `gaussian-factor:5`, `nested-factor:5` or `nested-factor:5:2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || Error::Config(format!("cannot parse cleaning scheme `{s}`"));
        let usize_at = |i: usize| parts.get(i).ok_or_else(bad)?.parse::<usize>().map_err(|_| bad());
        match (parts[0], parts.len()) {
            ("empirical", 1) => Ok(CleaningScheme::Empirical),
            ("ledoit-wolf", 2) => Ok(CleaningScheme::LedoitWolf {
                alpha: parts[1].parse().map_err(|_| bad())?,
            }),
            ("clipped", 2) => Ok(CleaningScheme::Clipped { m: usize_at(1)? }),
            ("multifactor", 2) => Ok(CleaningScheme::MultiFactorLinear { m: usize_at(1)? }),
            ("gaussian-factor", 2) => Ok(CleaningScheme::GaussianFactor { m: usize_at(1)? }),
            ("nested-factor", 2) => Ok(CleaningScheme::NestedFactor { m: usize_at(1)?, k: 1 }),
            ("nested-factor", 3) => Ok(CleaningScheme::NestedFactor {
                m: usize_at(1)?,
                k: usize_at(2)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// `0.0, 0.05, ..., 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// `{1, 2, 3, 5, 8, 12, 16, 24, 32, 48, 64, 96, 128, ...}` below `n`, then `n`.
pub fn default_m_grid(n: usize) -> Vec<usize> {
    let mut grid = vec![1, 2, 3, 5, 8, 12];
    let mut base = 16;
    while base < n {
        grid.push(base);
        grid.push(base * 3 / 2);
        base *= 2;
    }
    grid.retain(|&m| m < n);
    grid.push(n);
    grid.dedup();
    grid
}

/// The scheme set of a track over the default grids.
pub fn default_schemes(track: Track, n: usize) -> Vec<CleaningScheme> {
    let mut out = vec![CleaningScheme::Empirical];
    out.extend(default_alpha_grid().into_iter().map(|alpha| CleaningScheme::LedoitWolf { alpha }));
    let grid = default_m_grid(n);
    out.extend(grid.iter().map(|&m| CleaningScheme::Clipped { m }));
    match track {
        Track::Linear => out.extend(grid.iter().map(|&m| CleaningScheme::MultiFactorLinear { m })),
        Track::Absolute => {
            out.extend(grid.iter().map(|&m| CleaningScheme::GaussianFactor { m }));
            out.extend(grid.iter().map(|&m| CleaningScheme::NestedFactor { m, k: 1 }));
        }
    }
    out
}

/// Window dates `tau_n = T_is + n T_os + 1` (1-indexed) with `tau_n + T_os <= T`.
pub fn sliding_windows(t: usize, t_is: usize, t_os: usize) -> Result<Vec<usize>> {
    if t_is < 2 || t_os < 1 {
        return Err(Error::Config(format!("window sizes must be T_is >= 2 and T_os >= 1, got {t_is} and {t_os}")));
    }
    let taus: Vec<usize> = (0..)
        .map(|n| t_is + n * t_os + 1)
        .take_while(|tau| tau + t_os <= t)
        .collect();
    if taus.is_empty() {
        return Err(Error::Config(format!(
            "{t} dates cannot hold a window of {t_is} in-sample dates, one predictor date and {t_os} control dates"
        )));
    }
    Ok(taus)
}

/// Column means and population standard deviations over `rows`.
fn column_stats(x: &DMatrix<f64>, rows: std::ops::Range<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let (m, sd) = linalg::mean_std(col.as_slice()[rows.clone()].iter().copied());
        if !(sd > 0.0) {
            return Err(Error::DegenerateColumn { column: j });
        }
        means.push(m);
        sds.push(sd);
    }
    Ok((means, sds))
}

/// `(|x| - mean) / sd` per column, with mean and population sd of `|x|` taken
/// over `reference_rows`.
pub fn abs_return_transform(x: &DMatrix<f64>, reference_rows: std::ops::Range<usize>) -> Result<DMatrix<f64>> {
    let abs = x.abs();
    let (means, sds) = column_stats(&abs, reference_rows)?;
    Ok(DMatrix::from_fn(abs.nrows(), abs.ncols(), |t, j| (abs[(t, j)] - means[j]) / sds[j]))
}

fn standardized(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (means, sds) = column_stats(x, 0..x.nrows())?;
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |t, j| (x[(t, j)] - means[j]) / sds[j]))
}

/// In-sample correlation `(1/T) Z^T Z` of the standardized window, with an
/// exactly unit diagonal.
pub fn empirical_correlation(window: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut c = linalg::second_moment(&standardized(window)?);
    c.fill_diagonal(1.0);
    Ok(c)
}

/// `alpha C + (1 - alpha) T` with `T` the unit-diagonal matrix whose
/// off-diagonal entries are the mean off-diagonal entry of `C`.
pub fn ledoit_wolf(emp: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let n = emp.nrows();
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..i {
            off += emp[(i, j)];
        }
    }
    let mean = off / (n * (n - 1) / 2) as f64;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            alpha * emp[(i, j)] + (1.0 - alpha) * mean
        }
    })
}

/// Keeps the top `m` eigenpairs; the others share `(N - sum top) / (N - m)`.
pub fn clip_eigenvalues(emp: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let n = emp.nrows();
    if m >= n {
        return emp.clone();
    }
    let eig = linalg::sym_eigen(emp);
    let kept: f64 = eig.values[..m].iter().sum();
    let flat = (n as f64 - kept) / (n - m) as f64;
    let vals: Vec<f64> = (0..n).map(|i| if i < m { eig.values[i] } else { flat }).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| eig.vectors[(i, j)] * vals[j]);
    linalg::symmetrize(&(scaled * eig.vectors.transpose()))
}

/// `corr(|x|, |y|)` of a standard bivariate Gaussian with correlation `rho`.
pub fn gaussian_abs_corr(rho: f64) -> f64 {
    let c = 2.0 / std::f64::consts::PI;
    let r = rho.clamp(-1.0, 1.0);
    c * ((1.0 - r * r).sqrt() + r * r.asin() - 1.0) / (1.0 - c)
}

/// Weights `C^-1 g / (g^T C^-1 g)` and whether the ridge was needed.
pub fn optimal_weights(corr: &DMatrix<f64>, g: &[f64]) -> Result<(Vec<f64>, bool)> {
    let n = corr.nrows();
    if g.len() != n || corr.ncols() != n {
        return Err(Error::Dimension(format!("{}x{} matrix with {} gains", corr.nrows(), corr.ncols(), g.len())));
    }
    let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(corr));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let mut values = eig.eigenvalues.clone();
    let mut regularized = false;
    if !(min > 0.0) || max / min > MAX_CONDITION {
        values.add_scalar_mut(RIDGE);
        regularized = true;
        if !(values.min() > 0.0) {
            return Err(Error::SingularMatrix);
        }
    }
    let gv = DVector::from_column_slice(g);
    let proj = eig.eigenvectors.tr_mul(&gv);
    let scaled = proj.component_div(&values);
    let x = &eig.eigenvectors * scaled;
    let gain = gv.dot(&x);
    if !(gain.abs() > 0.0) || !gain.is_finite() {
        return Err(Error::SingularMatrix);
    }
    Ok(((x / gain).iter().copied().collect(), regularized))
}

/// `g_i = Y_i / sqrt(mean_j Y_j^2)`.
pub fn omniscient_predictor(row: &[f64]) -> Result<Vec<f64>> {
    let ms = row.iter().map(|y| y * y).sum::<f64>() / row.len() as f64;
    if !(ms > 0.0) {
        return Err(Error::ZeroRow);
    }
    let norm = ms.sqrt();
    Ok(row.iter().map(|y| y / norm).collect())
}

/// Quadratic risk `N (1/T') sum_t (sum_i Y_ti w_i / sigma_i)^2`.
pub fn risk(weights: &[f64], eval: &DMatrix<f64>, sigma_is: &[f64]) -> Result<f64> {
    let n = eval.ncols();
    if weights.len() != n || sigma_is.len() != n {
        return Err(Error::Dimension(format!(
            "{n} columns, {} weights, {} scales",
            weights.len(),
            sigma_is.len()
        )));
    }
    if let Some(j) = sigma_is.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::Domain(format!("in-sample volatility of asset {j} is not positive")));
    }
    let a: Vec<f64> = weights.iter().zip(sigma_is).map(|(w, s)| w / s).collect();
    let total: f64 = eval
        .row_iter()
        .map(|row| row.iter().zip(&a).map(|(y, w)| y * w).sum::<f64>().powi(2))
        .sum();
    Ok(n as f64 * total / eval.nrows() as f64)
}

/// Expected `(IS, OS)` risks of the empirical scheme on pure noise.
pub fn rmt_benchmark(q: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!("quality factor q = {q} must lie in [0, 1)")));
    }
    Ok((1.0 - q, 1.0 / (1.0 - q)))
}

/// `(r_clip - r_mf) / (r_clip - 1)`.
pub fn relative_gain(r_clip: f64, r_mf: f64) -> Result<f64> {
    if r_clip == 1.0 {
        return Err(Error::DivisionByZero("relative gain with clipped risk equal to the true risk"));
    }
    Ok((r_clip - r_mf) / (r_clip - 1.0))
}

/// `(r_fng - r_fg) / (r_fng - 1)`.
pub fn over_perf(r_fng: f64, r_fg: f64) -> Result<f64> {
    if r_fng == 1.0 {
        return Err(Error::DivisionByZero("over-performance with model risk equal to the true risk"));
    }
    Ok((r_fng - r_fg) / (r_fng - 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOptions {
    /// In-sample length; `None` means `2 N`.
    pub t_is: Option<usize>,
    pub t_os: usize,
    pub seed: u64,
    pub weights: WeightCalibration,
    /// Start each window's factor fit from the previous window's weights.
    /// Windows then run sequentially.
    pub warm_start: bool,
    /// Simulated dates per window for the nested-factor scheme.
    pub n_sim: usize,
    pub nested: NestedVolOptions,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        BacktestOptions {
            t_is: None,
            t_os: 59,
            seed: 0,
            weights: WeightCalibration::default(),
            warm_start: false,
            n_sim: 100_000,
            nested: NestedVolOptions::default(),
        }
    }
}

/// Everything a cleaning scheme may use from one window.
#[derive(Debug, Clone)]
pub struct WindowData {
    /// In-sample returns (T_is×N).
    pub returns: DMatrix<f64>,
    /// In-sample portfolio assets (returns or transformed absolute returns).
    pub y: DMatrix<f64>,
}

/// Cleaned matrix for one window. `start` warm-starts factor fits; the
/// returned model (if any) can seed the next window.
pub fn clean_correlation(
    window: &WindowData,
    scheme: CleaningScheme,
    opts: &BacktestOptions,
    seed: u64,
    start: Option<&LinearFactorModel>,
) -> Result<(DMatrix<f64>, Option<LinearFactorModel>)> {
    let fit_factors = |m: usize| -> Result<LinearFactorModel> {
        let corr = empirical_correlation(&window.returns)?;
        let (model, report) = linfactor::calibrate_weights_from_correlation(&corr, m, start, &opts.weights)?;
        if !report.converged {
            log::warn!("factor weights for M = {m} stopped after {} iterations", report.iterations);
        }
        Ok(model)
    };
    match scheme {
        CleaningScheme::Empirical => Ok((empirical_correlation(&window.y)?, None)),
        CleaningScheme::LedoitWolf { alpha } => Ok((ledoit_wolf(&empirical_correlation(&window.y)?, alpha), None)),
        CleaningScheme::Clipped { m } => Ok((clip_eigenvalues(&empirical_correlation(&window.y)?, m), None)),
        CleaningScheme::MultiFactorLinear { m } => {
            let model = fit_factors(m)?;
            Ok((model.model_correlation(), Some(model)))
        }
        CleaningScheme::GaussianFactor { m } => {
            let model = fit_factors(m)?;
            let mut c = model.model_correlation().map(gaussian_abs_corr);
            c.fill_diagonal(1.0);
            Ok((c, Some(model)))
        }
        CleaningScheme::NestedFactor { m, k } => {
            let model = fit_factors(m)?;
            let returns = standardized(&window.returns)?;
            let series = linfactor::extract_series_from_matrix(&returns, &model)?;
            let nested = NestedVolOptions {
                n_modes: k,
                ..opts.nested.clone()
            };
            let fit = calibrate_nested(&series, &nested)?;
            let spec = GeneratorSpec::new(model.clone(), fit.vol, opts.n_sim, seed)?;
            Ok((model_implied_abs_corr(&spec, opts.n_sim)?, Some(model)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRisk {
    pub tau: usize,
    pub risk_is: f64,
    pub risk_os: f64,
    /// `g^T w*`, 1 up to rounding.
    pub gain: f64,
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub scheme: CleaningScheme,
    pub windows: Vec<WindowRisk>,
    pub mean_is: f64,
    pub mean_os: f64,
}

/// Per-window seed for a scheme, independent of execution order.
pub fn window_seed(master: u64, tau: usize, scheme_index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((tau as u64) << 20) ^ scheme_index as u64);
    rng.next_u64()
}

/// Window inputs plus `g`, in-sample scales and the IS / OS evaluation blocks.
type Prepared = (WindowData, Vec<f64>, Vec<f64>, DMatrix<f64>, DMatrix<f64>);

fn prepare(panel: &ReturnPanel, track: Track, tau: usize, t_is: usize, t_os: usize) -> Result<Prepared> {
    let x = panel.returns();
    let is_start = tau - 1 - t_is;
    let rows = is_start..tau + t_os;
    let block = x.rows(is_start, rows.len()).into_owned();
    let y = match track {
        Track::Linear => block.clone(),
        Track::Absolute => abs_return_transform(&block, 0..t_is)?,
    };
    let y_is = y.rows(0, t_is).into_owned();
    let g_row: Vec<f64> = y.row(t_is).iter().copied().collect();
    let g = omniscient_predictor(&g_row)?;
    let y_os = y.rows(t_is + 1, t_os).into_owned();
    let (_, sigma) = column_stats(&y_is, 0..t_is)?;
    let data = WindowData {
        returns: block.rows(0, t_is).into_owned(),
        y: y_is.clone(),
    };
    Ok((data, g, sigma, y_is, y_os))
}

fn evaluate(
    corr: &DMatrix<f64>,
    g: &[f64],
    sigma: &[f64],
    y_is: &DMatrix<f64>,
    y_os: &DMatrix<f64>,
    tau: usize,
) -> Result<WindowRisk> {
    let (w, regularized) = optimal_weights(corr, g)?;
    let gain = w.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok(WindowRisk {
        tau,
        risk_is: risk(&w, y_is, sigma)?,
        risk_os: risk(&w, y_os, sigma)?,
        gain,
        regularized,
    })
}

fn run_window(
    panel: &ReturnPanel,
    schemes: &[CleaningScheme],
    track: Track,
    tau: usize,
    t_is: usize,
    opts: &BacktestOptions,
    starts: &HashMap<usize, LinearFactorModel>,
) -> Result<(Vec<WindowRisk>, HashMap<usize, LinearFactorModel>)> {
    let (data, g, sigma, y_is, y_os) = prepare(panel, track, tau, t_is, opts.t_os)?;
    let mut fitted = HashMap::new();
    let mut out = Vec::with_capacity(schemes.len());
    for (s, scheme) in schemes.iter().enumerate() {
        let m = match *scheme {
            CleaningScheme::MultiFactorLinear { m } | CleaningScheme::GaussianFactor { m } | CleaningScheme::NestedFactor { m, .. } => Some(m),
            _ => None,
        };
        let start = if opts.warm_start { m.and_then(|m| starts.get(&m)) } else { None };
        let (corr, model) = clean_correlation(&data, *scheme, opts, window_seed(opts.seed, tau, s), start)?;
        if let (Some(m), Some(model)) = (m, model) {
            fitted.insert(m, model);
        }
        out.push(evaluate(&corr, &g, &sigma, &y_is, &y_os, tau)?);
    }
    Ok((out, fitted))
}

/// Runs every scheme on every window and averages the risks.
pub fn run_backtest(
    panel: &ReturnPanel,
    schemes: &[CleaningScheme],
    track: Track,
    opts: &BacktestOptions,
) -> Result<Vec<BacktestReport>> {
    let n = panel.n_assets();
    if schemes.is_empty() {
        return Err(Error::Config("no cleaning schemes requested".into()));
    }
    for s in schemes {
        s.validate(n, track)?;
    }
    let t_is = opts.t_is.unwrap_or(2 * n);
    let taus = sliding_windows(panel.n_dates(), t_is, opts.t_os)?;
    let per_window: Vec<Vec<WindowRisk>> = if opts.warm_start {
        let mut starts = HashMap::new();
        let mut out = Vec::with_capacity(taus.len());
        for &tau in &taus {
            let (risks, fitted) = run_window(panel, schemes, track, tau, t_is, opts, &starts)?;
            starts = fitted;
            out.push(risks);
        }
        out
    } else {
        let empty = HashMap::new();
        taus.par_iter()
            .map(|&tau| run_window(panel, schemes, track, tau, t_is, opts, &empty).map(|r| r.0))
            .collect::<Result<_>>()?
    };
    Ok(schemes
        .iter()
        .enumerate()
        .map(|(s, scheme)| {
            let windows: Vec<WindowRisk> = per_window.iter().map(|w| w[s]).collect();
            let count = windows.len() as f64;
            BacktestReport {
                scheme: *scheme,
                mean_is: windows.iter().map(|w| w.risk_is).sum::<f64>() / count,
                mean_os: windows.iter().map(|w| w.risk_os).sum::<f64>() / count,
                windows,
            }
        })
        .collect())
}

/// Writes `summary.csv`, `windows.csv` and `curves.csv` (and `curves.svg`
/// when `plot` is set) into `dir`.
pub fn write_reports(
    dir: &Path,
    reports: &[BacktestReport],
    n_assets: usize,
    t_is: usize,
    precision: Option<usize>,
    plot: bool,
) -> Result<()> {
    let f = |v: f64| fmt_value(v, precision);
    let mut summary = String::from("scheme,parameter,mean_is,mean_os,n_windows\n");
    let mut windows = String::from("scheme,parameter,tau,risk_is,risk_os,gain,regularized\n");
    let mut curves = String::from("scheme,control,mean_is,mean_os\n");
    for r in reports {
        let (name, param) = (r.scheme.name(), r.scheme.parameter());
        summary.push_str(&format!("{name},{param},{},{},{}\n", f(r.mean_is), f(r.mean_os), r.windows.len()));
        for w in &r.windows {
            windows.push_str(&format!(
                "{name},{param},{},{},{},{},{}\n",
                w.tau,
                f(w.risk_is),
                f(w.risk_os),
                f(w.gain),
                w.regularized
            ));
        }
        curves.push_str(&format!("{name},{},{},{}\n", f(r.scheme.control(n_assets)), f(r.mean_is), f(r.mean_os)));
    }
    write_file(&dir.join("summary.csv"), summary.as_bytes())?;
    write_file(&dir.join("windows.csv"), windows.as_bytes())?;
    write_file(&dir.join("curves.csv"), curves.as_bytes())?;
    if plot {
        let mut p = Plot::new("Out-of-sample vs in-sample risk", "mean in-sample risk", "mean out-of-sample risk");
        let mut families: Vec<&str> = Vec::new();
        for r in reports {
            if !families.contains(&r.scheme.name()) {
                families.push(r.scheme.name());
            }
        }
        for fam in families {
            let pts = reports
                .iter()
                .filter(|r| r.scheme.name() == fam)
                .map(|r| (r.mean_is, r.mean_os))
                .collect();
            p.add(fam, pts, Style::Points);
        }
        let q = n_assets as f64 / t_is as f64;
        if let Ok((is, os)) = rmt_benchmark(q) {
            p.add("noise benchmark", vec![(is, os), (1.0, 1.0)], Style::Dashed);
        }
        p.save(&dir.join("curves.svg"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise_panel(t: usize, n: usize, seed: u64) -> ReturnPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ReturnPanel::from_matrix(DMatrix::from_fn(t, n, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    #[test]
    fn window_schedule() {
        assert_eq!(sliding_windows(524 + 59 + 1, 524, 59).unwrap(), vec![525]);
        assert_eq!(sliding_windows(10 + 3 * 5 + 1, 10, 5).unwrap(), vec![11, 16, 21]);
        assert!(matches!(sliding_windows(524 + 58, 524, 59), Err(Error::Config(_))));
        // the control windows tile the tail without overlap
        let taus = sliding_windows(1000, 100, 30).unwrap();
        for w in taus.windows(2) {
            assert_eq!(w[1] - w[0], 30);
        }
        assert!(taus.last().unwrap() + 30 <= 1000 && taus.last().unwrap() + 60 > 1000);
    }

    #[test]
    fn weight_examples() {
        let id = DMatrix::identity(3, 3);
        let (w, reg) = optimal_weights(&id, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
        assert!(!reg);
        let (w, _) = optimal_weights(&id, &[1.0, 2.0, 2.0]).unwrap();
        for (a, b) in w.iter().zip([1.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let rho = 0.3;
        let c = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        // C^-1 (1, 1) = (1, 1) / (1 + rho); the unit budget rescales it to (1/2, 1/2).
        let (w, _) = optimal_weights(&c, &[1.0, 1.0]).unwrap();
        for v in w {
            assert!((v - 0.5).abs() < 1e-14);
        }
        let singular = DMatrix::from_element(2, 2, 1.0);
        let (w, reg) = optimal_weights(&singular, &[1.0, -0.5]).unwrap();
        assert!(reg);
        assert!((w[0] - 0.5 * w[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn predictor_examples() {
        assert_eq!(omniscient_predictor(&[1.0; 4]).unwrap(), vec![1.0; 4]);
        let g = omniscient_predictor(&[2.0, 0.0]).unwrap();
        assert!((g[0] - 2f64.sqrt()).abs() < 1e-15 && g[1] == 0.0);
        let a = omniscient_predictor(&[0.4, -1.2]).unwrap();
        let b = omniscient_predictor(&[4.0, -12.0]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(matches!(omniscient_predictor(&[0.0, 0.0]), Err(Error::ZeroRow)));
    }

    #[test]
    fn risk_examples() {
        let y = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(risk(&[1.0], &y, &[1.0]).unwrap(), 1.0);
        assert_eq!(risk(&[0.0], &y, &[1.0]).unwrap(), 0.0);
        assert!(matches!(risk(&[1.0, 2.0], &y, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn true_weights_have_unit_risk() {
        // iid unit-variance data: true correlation is the identity
        let t = 200_000;
        let p = noise_panel(t, 20, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0.0;
        for _ in 0..50 {
            let row: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
            let g = omniscient_predictor(&row).unwrap();
            let (w, _) = optimal_weights(&DMatrix::identity(20, 20), &g).unwrap();
            total += risk(&w, p.returns(), &[1.0; 20]).unwrap();
        }
        assert!((total / 50.0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn abs_transform_examples() {
        let x = DMatrix::from_column_slice(4, 2, &[1.0, -1.0, 1.0, -1.0, 0.5, 2.0, -1.0, 0.0]);
        assert!(matches!(abs_return_transform(&x, 0..4), Err(Error::DegenerateColumn { column: 0 })));
        let p = noise_panel(400_000, 2, 6);
        let abs_mean = p.returns().column(0).iter().map(|v| v.abs()).sum::<f64>() / 400_000.0;
        assert!((abs_mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.003);
        let y = abs_return_transform(p.returns(), 0..400_000).unwrap();
        let (m, sd) = linalg::mean_std(y.column(1).iter().copied());
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cleaning_endpoints() {
        let p = noise_panel(60, 8, 7);
        let emp = empirical_correlation(p.returns()).unwrap();
        assert_eq!(ledoit_wolf(&emp, 1.0), emp);
        let target = ledoit_wolf(&emp, 0.0);
        let off = target[(0, 1)];
        assert!(target.iter().enumerate().all(|(k, v)| if k % 9 == 0 { *v == 1.0 } else { (*v - off).abs() < 1e-15 }));
        assert_eq!(clip_eigenvalues(&emp, 8), emp);
        for m in 1..8 {
            let c = clip_eigenvalues(&emp, m);
            assert!((c.trace() - 8.0).abs() < 1e-12);
            let e = linalg::sym_eigen(&c);
            assert!((e.values[m] - e.values[7]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_abs_corr_values() {
        assert_eq!(gaussian_abs_corr(0.0), 0.0);
        assert!((gaussian_abs_corr(1.0) - 1.0).abs() < 1e-15);
        assert!((gaussian_abs_corr(-0.5) - gaussian_abs_corr(0.5)).abs() < 1e-15);
    }

    #[test]
    fn benchmark_and_ratios() {
        assert_eq!(rmt_benchmark(0.0).unwrap(), (1.0, 1.0));
        assert_eq!(rmt_benchmark(0.5).unwrap(), (0.5, 2.0));
        assert!(matches!(rmt_benchmark(1.0), Err(Error::Domain(_))));
        assert_eq!(relative_gain(1.3, 1.3).unwrap(), 0.0);
        assert!((relative_gain(1.2, 1.187).unwrap() - 0.065).abs() < 1e-12);
        assert!(over_perf(1.4, 1.5).unwrap() < 0.0);
        assert!(relative_gain(1.0, 1.1).is_err());
    }

    #[test]
    fn scheme_parsing_and_validation() {
        for s in ["empirical", "ledoit-wolf:0.25", "clipped:4", "multifactor:3", "gaussian-factor:2", "nested-factor:5:2"] {
            let scheme: CleaningScheme = s.parse().unwrap();
            assert_eq!(scheme.name(), s.split(':').next().unwrap());
        }
        assert!("clipped".parse::<CleaningScheme>().is_err());
        assert!(CleaningScheme::Clipped { m: 9 }.validate(8, Track::Linear).is_err());
        assert!(CleaningScheme::NestedFactor { m: 2, k: 1 }.validate(8, Track::Linear).is_err());
        assert!(CleaningScheme::LedoitWolf { alpha: 1.5 }.validate(8, Track::Linear).is_err());
        assert_eq!(default_m_grid(50), vec![1, 2, 3, 5, 8, 12, 16, 24, 32, 48, 50]);
        assert_eq!(default_m_grid(262).last(), Some(&262));
        assert_eq!(default_alpha_grid().len(), 21);
    }

    #[test]
    fn collapse_and_budget_on_noise() {
        let p = noise_panel(40 + 4 * 10 + 1, 10, 9);
        let schemes = [
            CleaningScheme::Empirical,
            CleaningScheme::LedoitWolf { alpha: 1.0 },
            CleaningScheme::Clipped { m: 10 },
            CleaningScheme::MultiFactorLinear { m: 10 },
            CleaningScheme::Clipped { m: 2 },
        ];
        let opts = BacktestOptions {
            t_is: Some(40),
            t_os: 10,
            ..Default::default()
        };
        let reports = run_backtest(&p, &schemes, Track::Linear, &opts).unwrap();
        assert_eq!(reports[0].windows.len(), 4);
        for r in &reports {
            for w in &r.windows {
                assert!((w.gain - 1.0).abs() < 1e-10);
                assert!(w.risk_is >= 0.0 && w.risk_os >= 0.0);
            }
        }
        for k in 1..3 {
            for (a, b) in reports[0].windows.iter().zip(&reports[k].windows) {
                assert!((a.risk_is - b.risk_is).abs() < 1e-10 && (a.risk_os - b.risk_os).abs() < 1e-10);
            }
        }
        assert!((reports[3].mean_os - reports[0].mean_os).abs() < 1e-6);
        let abs = run_backtest(&p, &[CleaningScheme::Empirical, CleaningScheme::GaussianFactor { m: 2 }], Track::Absolute, &opts)
            .unwrap();
        assert!(abs.iter().all(|r| r.mean_os.is_finite()));
    }

    #[test]
    fn warm_start_matches_cold_start_at_full_rank() {
        let p = noise_panel(30 + 2 * 8 + 1, 6, 10);
        let mut opts = BacktestOptions {
            t_is: Some(30),
            t_os: 8,
            ..Default::default()
        };
        let cold = run_backtest(&p, &[CleaningScheme::MultiFactorLinear { m: 2 }], Track::Linear, &opts).unwrap();
        opts.warm_start = true;
        let warm = run_backtest(&p, &[CleaningScheme::MultiFactorLinear { m: 2 }], Track::Linear, &opts).unwrap();
        assert!((cold[0].mean_os - warm[0].mean_os).abs() < 1e-3 * cold[0].mean_os);
    }
}
