//! Synthetic return panels from a fully specified nested factor model.
//!
//! `Omega_0` is drawn from a shifted and scaled Beta law matched to
//! `(0, 1, zeta0, 3 + kappa0)`; every other driver is Gaussian. Each date owns
//! its own ChaCha stream, so output does not depend on the thread count.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_file, ReturnPanel};
use crate::error::{Error, Result};
use crate::linfactor::LinearFactorModel;
use crate::volcal::{VolModel, VolModelFile};

/// Distance from `(0, 0)` under which `Omega_0` is sampled as a Gaussian.
pub const GAUSSIAN_TOLERANCE: f64 = 1e-3;

const BLOCK: usize = 2048;

/// `Omega_0 = shift + scale * X` with `X ~ Beta(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
    pub shift: f64,
    pub scale: f64,
}

/// Skewness and excess kurtosis of `Beta(alpha, beta)`.
pub fn beta_shape_moments(alpha: f64, beta: f64) -> (f64, f64) {
    let s = alpha + beta;
    let skew = 2.0 * (beta - alpha) * (s + 1.0).sqrt() / ((s + 2.0) * (alpha * beta).sqrt());
    let kurt = 6.0 * ((alpha - beta).powi(2) * (s + 1.0) - alpha * beta * (s + 2.0))
        / (alpha * beta * (s + 2.0) * (s + 3.0));
    (skew, kurt)
}

/// Whether `(zeta0, kappa0)` lies strictly inside the Beta region
/// `zeta0^2 - 2 < kappa0 < 1.5 zeta0^2`.
pub fn beta_feasible(zeta0: f64, kappa0: f64) -> bool {
    let z2 = zeta0 * zeta0;
    zeta0.is_finite() && kappa0.is_finite() && kappa0 > z2 - 2.0 && kappa0 < 1.5 * z2
}

/// Beta law with mean 0, variance 1, skewness `zeta0` and excess kurtosis `kappa0`.
pub fn match_beta(zeta0: f64, kappa0: f64) -> Result<BetaParams> {
    if !beta_feasible(zeta0, kappa0) {
        return Err(Error::InfeasibleMoments { zeta0, kappa0 });
    }
    let b1 = zeta0 * zeta0;
    let b2 = 3.0 + kappa0;
    let r = 6.0 * (b2 - b1 - 1.0) / (6.0 + 3.0 * b1 - 2.0 * b2);
    let d = (r + 2.0) * b1.sqrt() / ((r + 2.0).powi(2) * b1 + 16.0 * (r + 1.0)).sqrt();
    let (small, large) = (0.5 * r * (1.0 - d), 0.5 * r * (1.0 + d));
    // Positive skew puts the long tail on the right, i.e. alpha < beta.
    let (alpha, beta) = if zeta0 >= 0.0 { (small, large) } else { (large, small) };
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::InfeasibleMoments { zeta0, kappa0 });
    }
    let s = alpha + beta;
    let mean = alpha / s;
    let sd = (alpha * beta / (s * s * (s + 1.0))).sqrt();
    Ok(BetaParams {
        alpha,
        beta,
        shift: -mean / sd,
        scale: 1.0 / sd,
    })
}

/// `ln 1F1(a; b; z)` for `b > a > 0`, via Kummer's transformation for `z < 0`.
pub fn ln_hyp1f1(a: f64, b: f64, z: f64) -> f64 {
    if z < 0.0 {
        return z + ln_hyp1f1(b - a, b, -z);
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 0.0;
    loop {
        term *= (a + n) / (b + n) * z / (n + 1.0);
        sum += term;
        n += 1.0;
        if term < 1e-17 * sum && n > z {
            break;
        }
        if n > 1e5 {
            break;
        }
    }
    sum.ln()
}

/// Sampling law of `Omega_0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaLaw {
    Beta(BetaParams),
    /// Standard Gaussian; `fallback` is set when the requested moments were
    /// non-zero but could not be represented.
    Gaussian { fallback: bool },
}

impl OmegaLaw {
    /// `ln E[exp(t Omega_0)]`, exact for the sampling law.
    pub fn ln_mgf(&self, t: f64) -> f64 {
        match *self {
            OmegaLaw::Gaussian { .. } => 0.5 * t * t,
            OmegaLaw::Beta(p) => t * p.shift + ln_hyp1f1(p.alpha, p.alpha + p.beta, t * p.scale),
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, OmegaLaw::Gaussian { fallback: true })
    }
}

/// What to do when `(zeta0, kappa0)` is outside the Beta family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasiblePolicy {
    /// Sample a standard Gaussian and flag it.
    #[default]
    Gaussian,
    /// Move to the nearest interior point along the kurtosis axis.
    Project,
    Error,
}

impl std::str::FromStr for InfeasiblePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InfeasiblePolicy::Gaussian),
            "project" => Ok(InfeasiblePolicy::Project),
            "error" => Ok(InfeasiblePolicy::Error),
            other => Err(Error::Config(format!("unknown infeasible-moment policy `{other}`"))),
        }
    }
}

/// Resolves the law of `Omega_0` for the requested moments.
pub fn omega_law(zeta0: f64, kappa0: f64, policy: InfeasiblePolicy) -> Result<OmegaLaw> {
    if zeta0.hypot(kappa0) < GAUSSIAN_TOLERANCE {
        return Ok(OmegaLaw::Gaussian { fallback: false });
    }
    match match_beta(zeta0, kappa0) {
        Ok(p) => Ok(OmegaLaw::Beta(p)),
        Err(e) => match policy {
            InfeasiblePolicy::Error => Err(e),
            InfeasiblePolicy::Gaussian => {
                log::warn!("(zeta0, kappa0) = ({zeta0}, {kappa0}) outside the Beta family; sampling Omega_0 as Gaussian");
                Ok(OmegaLaw::Gaussian { fallback: true })
            }
            InfeasiblePolicy::Project => {
                let z2 = zeta0 * zeta0;
                let margin = 0.02 * (1.0 + 0.5 * z2);
                let lo = z2 - 2.0 + margin;
                let hi = 1.5 * z2 - margin;
                if lo >= hi {
                    log::warn!("no interior Beta point at zeta0 = {zeta0}; sampling Omega_0 as Gaussian");
                    return Ok(OmegaLaw::Gaussian { fallback: true });
                }
                let k = kappa0.clamp(lo, hi);
                log::warn!("projecting kappa0 = {kappa0} to {k} for Beta sampling");
                match_beta(zeta0, k).map(OmegaLaw::Beta)
            }
        },
    }
}

/// Everything needed to draw a synthetic panel.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub linear: LinearFactorModel,
    pub vol: VolModel,
    pub t_sim: usize,
    pub seed: u64,
    pub policy: InfeasiblePolicy,
}

impl GeneratorSpec {
    pub fn new(linear: LinearFactorModel, vol: VolModel, t_sim: usize, seed: u64) -> Result<Self> {
        let spec = GeneratorSpec {
            linear,
            vol,
            t_sim,
            seed,
            policy: InfeasiblePolicy::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_sim < 1 {
            return Err(Error::Config("t_sim must be at least 1".into()));
        }
        if self.linear.n_factors() != self.vol.n_factors() || self.linear.n_assets() != self.vol.n_assets() {
            return Err(Error::Dimension(format!(
                "linear model is {}x{}, volatility model {}x{}",
                self.linear.n_factors(),
                self.linear.n_assets(),
                self.vol.n_factors(),
                self.vol.n_assets()
            )));
        }
        if let Some(j) = self.linear.residual_variances().iter().position(|v| *v < -1e-12) {
            return Err(Error::Domain(format!("asset {j} has weight norm above 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorFile {
    generator: GeneratorSection,
    linear: LinearSection,
    #[serde(flatten)]
    vol: VolModelFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorSection {
    t_sim: usize,
    seed: u64,
    #[serde(default)]
    infeasible: InfeasiblePolicy,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinearSection {
    /// One row per factor.
    weights: Vec<Vec<f64>>,
}

impl GeneratorSpec {
    pub fn to_toml(&self) -> String {
        let w = self.linear.weights();
        let file = GeneratorFile {
            generator: GeneratorSection {
                t_sim: self.t_sim,
                seed: self.seed,
                infeasible: self.policy,
            },
            linear: LinearSection {
                weights: w.row_iter().map(|r| r.iter().copied().collect()).collect(),
            },
            vol: self.vol.to_file(),
        };
        toml::to_string(&file).expect("generator serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: GeneratorFile = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        let rows = &file.linear.weights;
        let n = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Toml("weights must be a non-empty rectangular array".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let linear = LinearFactorModel::new(DMatrix::from_row_slice(rows.len(), n, &flat))?;
        let mut spec = GeneratorSpec::new(linear, VolModel::from_file(file.vol)?, file.generator.t_sim, file.generator.seed)?;
        spec.policy = file.generator.infeasible;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Precomputed state for drawing dates of a [`GeneratorSpec`].
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    law: OmegaLaw,
    beta: Option<Beta<f64>>,
    /// `-0.5 ln E[exp(2 x)]` for each factor's log-amplitude `x`.
    factor_log_norm: Vec<f64>,
    /// Same for residuals, plus `0.5 ln v_j`.
    residual_log_norm: Vec<f64>,
}

fn log_norm(law: &OmegaLaw, loadings: &DMatrix<f64>, i: usize, s: f64) -> f64 {
    let mut ln_ms = law.ln_mgf(2.0 * loadings[(i, 0)]) + 2.0 * s * s;
    if loadings.ncols() == 2 {
        ln_ms += 2.0 * loadings[(i, 1)].powi(2);
    }
    -0.5 * ln_ms
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let vol = &spec.vol;
        let law = omega_law(vol.zeta0, vol.kappa0, spec.policy)?;
        let beta = match law {
            OmegaLaw::Beta(p) => Some(Beta::new(p.alpha, p.beta).map_err(|e| Error::Domain(e.to_string()))?),
            OmegaLaw::Gaussian { .. } => None,
        };
        let factor_log_norm = (0..vol.n_factors())
            .map(|k| log_norm(&law, &vol.a, k, vol.s[k]))
            .collect();
        let residual_log_norm = spec
            .linear
            .residual_variances()
            .iter()
            .enumerate()
            .map(|(j, v)| log_norm(&law, &vol.b, j, vol.s_tilde[j]) + 0.5 * v.max(0.0).ln())
            .collect();
        Ok(Generator {
            spec: spec.clone(),
            law,
            beta,
            factor_log_norm,
            residual_log_norm,
        })
    }

    pub fn law(&self) -> OmegaLaw {
        self.law
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn rng(&self, t: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(t as u64);
        rng
    }

    fn draw_omega0(&self, rng: &mut ChaCha8Rng) -> f64 {
        match (&self.beta, self.law) {
            (Some(b), OmegaLaw::Beta(p)) => p.shift + p.scale * rng.sample(b),
            _ => rng.sample(StandardNormal),
        }
    }

    /// Draws date `t` into `factors` (M) and `returns` (N).
    pub fn draw_date(&self, t: usize, factors: &mut [f64], returns: &mut [f64]) {
        let vol = &self.spec.vol;
        let w = self.spec.linear.weights();
        let m = vol.n_factors();
        let n = vol.n_assets();
        let mut rng = self.rng(t);
        let o0 = self.draw_omega0(&mut rng);
        let o1: f64 = if vol.n_modes() == 2 { rng.sample(StandardNormal) } else { 0.0 };
        for k in 0..m {
            let omega: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let mut x = vol.a[(k, 0)] * o0 + vol.s[k] * omega + self.factor_log_norm[k];
            if vol.n_modes() == 2 {
                x += vol.a[(k, 1)] * o1;
            }
            factors[k] = eps * x.exp();
        }
        for j in 0..n {
            let omega: f64 = rng.sample(StandardNormal);
            let eta: f64 = rng.sample(StandardNormal);
            let mut x = vol.b[(j, 0)] * o0 + vol.s_tilde[j] * omega + self.residual_log_norm[j];
            if vol.n_modes() == 2 {
                x += vol.b[(j, 1)] * o1;
            }
            let mut r = eta * x.exp();
            for k in 0..m {
                r += factors[k] * w[(k, j)];
            }
            returns[j] = r;
        }
    }

    /// Rows `start..end` of the return matrix.
    pub fn draw_block(&self, start: usize, end: usize) -> DMatrix<f64> {
        let m = self.spec.vol.n_factors();
        let n = self.spec.vol.n_assets();
        let mut out = DMatrix::zeros(end - start, n);
        let mut f = vec![0.0; m];
        let mut r = vec![0.0; n];
        for t in start..end {
            self.draw_date(t, &mut f, &mut r);
            for j in 0..n {
                out[(t - start, j)] = r[j];
            }
        }
        out
    }

    /// Draws `Omega_0` for dates `0..n` (same values the panel uses).
    pub fn omega0_sample(&self, n: usize) -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|t| self.draw_omega0(&mut self.rng(t)))
            .collect()
    }

    /// The full T_sim×N return matrix; unlike a panel, N = 1 is allowed.
    pub fn simulate_matrix(&self) -> DMatrix<f64> {
        let t = self.spec.t_sim;
        let n = self.spec.vol.n_assets();
        let blocks: Vec<DMatrix<f64>> = (0..t.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| self.draw_block(b * BLOCK, ((b + 1) * BLOCK).min(t)))
            .collect();
        let mut out = DMatrix::zeros(t, n);
        for (b, block) in blocks.iter().enumerate() {
            out.rows_mut(b * BLOCK, block.nrows()).copy_from(block);
        }
        out
    }

    pub fn simulate(&self) -> Result<ReturnPanel> {
        let out = self.simulate_matrix();
        let (t, n) = out.shape();
        let dates = (0..t).map(|i| format!("t{i:07}")).collect();
        let ids = (0..n).map(|j| format!("a{j:04}")).collect();
        ReturnPanel::new(out, dates, ids, None)
    }

    /// Monte-Carlo `corr(|r_i|, |r_j|)` over `n_samples` dates.
    pub fn abs_corr(&self, n_samples: usize) -> DMatrix<f64> {
        let n = self.spec.vol.n_assets();
        let partials: Vec<(Vec<f64>, DMatrix<f64>)> = (0..n_samples.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let block = self.draw_block(b * BLOCK, ((b + 1) * BLOCK).min(n_samples)).abs();
                let sums = block.row_sum().iter().copied().collect();
                (sums, block.tr_mul(&block))
            })
            .collect();
        let mut sums = vec![0.0; n];
        let mut gram = DMatrix::zeros(n, n);
        for (s, g) in &partials {
            for j in 0..n {
                sums[j] += s[j];
            }
            gram += g;
        }
        let t = n_samples as f64;
        let mean: Vec<f64> = sums.iter().map(|s| s / t).collect();
        let cov = DMatrix::from_fn(n, n, |i, j| gram[(i, j)] / t - mean[i] * mean[j]);
        let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        let mut corr = DMatrix::from_fn(n, n, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
        let corr_t = corr.transpose();
        corr = (corr + corr_t) * 0.5;
        corr.fill_diagonal(1.0);
        corr
    }
}

pub fn simulate(spec: &GeneratorSpec) -> Result<ReturnPanel> {
    Generator::new(spec)?.simulate()
}

pub fn model_implied_abs_corr(spec: &GeneratorSpec, n_samples: usize) -> Result<DMatrix<f64>> {
    if n_samples < 2 {
        return Err(Error::Config("need at least two simulated dates".into()));
    }
    Ok(Generator::new(spec)?.abs_corr(n_samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mean_std;
    use proptest::prelude::*;

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    /// `E[exp(t X)]` for `X ~ Beta(a, b)` by Simpson's rule, with the
    /// substitutions `x = y^(1/a)` on [0, 1/2] and `1 - x = y^(1/b)` on
    /// [1/2, 1] to remove the endpoint singularities of the density.
    fn beta_mgf_quadrature(a: f64, b: f64, t: f64) -> f64 {
        let norm = statrs::function::beta::ln_beta(a, b).exp();
        let n = 200_000;
        let left = simpson(|y| {
            let x = y.powf(1.0 / a);
            (1.0 - x).powf(b - 1.0) * (t * x).exp() / a
        }, 0.0, 0.5f64.powf(a), n);
        let right = simpson(|y| {
            let x = 1.0 - y.powf(1.0 / b);
            x.powf(a - 1.0) * (t * x).exp() / b
        }, 0.0, 0.5f64.powf(b), n);
        (left + right) / norm
    }

    #[test]
    fn symmetric_beta_two_two() {
        let p = match_beta(0.0, -6.0 / 7.0).unwrap();
        assert!((p.alpha - 2.0).abs() < 1e-10 && (p.beta - 2.0).abs() < 1e-10);
        // var of Beta(2,2) is 1/20
        assert!((p.scale - 20f64.sqrt()).abs() < 1e-10);
        assert!((p.shift + 0.5 * 20f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn gaussian_point_and_infeasible_targets() {
        assert!(matches!(match_beta(0.0, 0.0), Err(Error::InfeasibleMoments { .. })));
        assert_eq!(
            omega_law(0.0, 0.0, InfeasiblePolicy::Error).unwrap(),
            OmegaLaw::Gaussian { fallback: false }
        );
        // below the universal bound kappa >= zeta^2 - 2
        assert!(matches!(match_beta(-1.492, -1.916), Err(Error::InfeasibleMoments { .. })));
        assert!(omega_law(-1.492, -1.916, InfeasiblePolicy::Gaussian).unwrap().is_fallback());
        let OmegaLaw::Beta(p) = omega_law(-1.492, -1.916, InfeasiblePolicy::Project).unwrap() else {
            panic!("projection should give a Beta law");
        };
        let (skew, _) = beta_shape_moments(p.alpha, p.beta);
        assert!((skew + 1.492).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn matched_moments_hit_targets(zeta in -2.0f64..2.0, frac in 0.02f64..0.98) {
            let z2 = zeta * zeta;
            prop_assume!(z2 > 0.05);
            let kappa = (z2 - 2.0) + frac * (0.5 * z2 + 2.0);
            let p = match_beta(zeta, kappa).unwrap();
            let (skew, kurt) = beta_shape_moments(p.alpha, p.beta);
            prop_assert!((skew - zeta).abs() < 1e-6);
            prop_assert!((kurt - kappa).abs() < 1e-6);
            let s = p.alpha + p.beta;
            let mean = p.alpha / s;
            let var = p.alpha * p.beta / (s * s * (s + 1.0));
            prop_assert!((p.shift + p.scale * mean).abs() < 1e-8);
            prop_assert!((p.scale * p.scale * var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn beta_mgf_matches_quadrature() {
        for &(a, b, t) in &[(2.0, 2.0, 1.5), (1.7, 4.2, -6.0), (3.5, 1.3, 9.0), (0.9, 2.5, 3.0)] {
            let exact = ln_hyp1f1(a, a + b, t).exp();
            let quad = beta_mgf_quadrature(a, b, t);
            assert!((exact / quad - 1.0).abs() < 1e-7, "{a} {b} {t}: {exact} vs {quad}");
        }
        assert_eq!(ln_hyp1f1(1.0, 2.0, 0.0), 0.0);
    }

    fn spec(m: usize, n: usize, w: f64, vol: VolModel, t: usize) -> GeneratorSpec {
        let linear = LinearFactorModel::new(DMatrix::from_element(m, n, w)).unwrap();
        GeneratorSpec::new(linear, vol, t, 42).unwrap()
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let s = spec(2, 3, 0.4, VolModel::uniform(2, 3, 0.5, 0.3, 0.2, 0.1, -0.6, -0.5), 5000);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate(&s).unwrap());
        let b = four.install(|| simulate(&s).unwrap());
        assert_eq!(a.returns(), b.returns());
        let c = four.install(|| model_implied_abs_corr(&s, 6000).unwrap());
        let d = one.install(|| model_implied_abs_corr(&s, 6000).unwrap());
        assert_eq!(c, d);
    }

    #[test]
    fn gaussian_limit_column() {
        let s = spec(1, 1, 0.0, VolModel::gaussian(1, 1, 1), 200_000);
        let r = Generator::new(&s).unwrap().simulate_matrix();
        let col: Vec<f64> = r.column(0).iter().copied().collect();
        let (mean, sd) = mean_std(col.iter().copied());
        let kurt = col.iter().map(|x| ((x - mean) / sd).powi(4)).sum::<f64>() / col.len() as f64;
        // SE of sample kurtosis of a Gaussian is sqrt(24/T)
        assert!((kurt - 3.0).abs() < 5.0 * (24.0 / col.len() as f64).sqrt());
    }

    #[test]
    fn variance_normalization_and_linear_correlation() {
        let t = 100_000;
        let w = DMatrix::from_row_slice(2, 3, &[0.6, 0.5, 0.2, 0.1, -0.4, 0.7]);
        let vol = VolModel::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.3, -0.1]),
            DMatrix::from_row_slice(3, 2, &[0.4, 0.1, 0.2, 0.3, 0.35, 0.0]),
            vec![0.2, 0.3],
            vec![0.1, 0.2, 0.15],
            -0.8,
            -0.6,
        )
        .unwrap();
        let s = GeneratorSpec::new(LinearFactorModel::new(w.clone()).unwrap(), vol, t, 9).unwrap();
        let g = Generator::new(&s).unwrap();
        assert!(matches!(g.law(), OmegaLaw::Beta(_)));
        let r = g.simulate().unwrap();
        let tol = 3.0 / (t as f64).sqrt();
        for j in 0..3 {
            let var = r.returns().column(j).iter().map(|x| x * x).sum::<f64>() / t as f64;
            // heavy tails inflate the sampling error of a variance
            assert!((var - 1.0).abs() < 4.0 * tol, "column {j}: {var}");
        }
        let model = LinearFactorModel::new(w).unwrap().model_correlation();
        let emp = crate::linfactor::sample_correlation(r.returns());
        for i in 0..3 {
            for j in 0..i {
                assert!((emp[(i, j)] - model[(i, j)]).abs() < 2.0 * tol);
            }
        }
    }

    #[test]
    fn omega0_moments_at_one_million() {
        let vol = VolModel::uniform(1, 1, 0.1, 0.1, 0.0, 0.0, -0.9, -0.4);
        let s = spec(1, 1, 0.0, vol, 10);
        let g = Generator::new(&s).unwrap();
        let x = g.omega0_sample(1_000_000);
        let n = x.len() as f64;
        for (power, target) in [(1, 0.0), (2, 1.0), (3, -0.9), (4, 2.6)] {
            let v: Vec<f64> = x.iter().map(|o| o.powi(power)).collect();
            let (m, sd) = mean_std(v.iter().copied());
            assert!((m - target).abs() < 5.0 * sd / n.sqrt(), "moment {power}: {m}");
        }
    }

    #[test]
    fn gaussian_abs_corr_closed_form() {
        let rho: f64 = 0.6;
        let w = (rho).sqrt();
        let s = spec(1, 2, w, VolModel::gaussian(1, 2, 1), 1);
        let c = model_implied_abs_corr(&s, 400_000).unwrap();
        let two_pi = 2.0 / std::f64::consts::PI;
        let expected = two_pi * ((1.0 - rho * rho).sqrt() + rho * rho.asin() - 1.0) / (1.0 - two_pi);
        assert!((c[(0, 1)] - expected).abs() < 0.01, "{} vs {expected}", c[(0, 1)]);
        let ind = spec(1, 3, 0.0, VolModel::gaussian(1, 3, 1), 1);
        let c = model_implied_abs_corr(&ind, 200_000).unwrap();
        assert!(c.iter().all(|v| v.abs() < 0.01 || *v == 1.0));
    }

    #[test]
    fn common_residual_loading_raises_abs_corr() {
        let lo = spec(1, 4, 0.3, VolModel::uniform(1, 4, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0), 1);
        let hi = spec(1, 4, 0.3, VolModel::uniform(1, 4, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0), 1);
        let a = model_implied_abs_corr(&lo, 200_000).unwrap();
        let b = model_implied_abs_corr(&hi, 200_000).unwrap();
        assert!(b[(0, 1)] > a[(0, 1)] + 0.05);
    }

    #[test]
    fn uniform_loadings_log_abs_corr() {
        // C^ff(p) off-diagonal for A = 0.5 is 0.25 in the Gaussian-Omega limit.
        let vol = VolModel::uniform(3, 2, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0);
        let linear = LinearFactorModel::new(DMatrix::zeros(3, 2)).unwrap();
        let s = GeneratorSpec::new(linear, vol, 400_000, 1).unwrap();
        let g = Generator::new(&s).unwrap();
        let mut f = vec![0.0; 3];
        let mut r = vec![0.0; 2];
        let t = s.t_sim;
        let mut fac = DMatrix::zeros(t, 3);
        for i in 0..t {
            g.draw_date(i, &mut f, &mut r);
            for k in 0..3 {
                fac[(i, k)] = f[k];
            }
        }
        let series = crate::linfactor::FactorSeries {
            factors: fac,
            residuals: DMatrix::from_fn(t, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0),
        };
        let set = crate::nlcorr::estimate_nlcorr(&series, &[1.0]).unwrap();
        assert!((set.cff[0][(0, 1)] - 0.25).abs() < 0.02, "{}", set.cff[0][(0, 1)]);
    }

    #[test]
    fn toml_round_trip() {
        let mut s = spec(2, 3, 0.3, VolModel::uniform(2, 3, 0.5, 0.3, 0.2, 0.1, -0.6, -0.5), 77);
        s.policy = InfeasiblePolicy::Project;
        let back = GeneratorSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_inconsistent_spec() {
        let linear = LinearFactorModel::new(DMatrix::zeros(2, 3)).unwrap();
        assert!(GeneratorSpec::new(linear.clone(), VolModel::gaussian(2, 4, 1), 10, 0).is_err());
        assert!(GeneratorSpec::new(linear, VolModel::gaussian(2, 3, 1), 0, 0).is_err());
    }
}
