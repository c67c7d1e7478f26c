//! Volatility layer of the nested model and its calibration.
//!
//! Factors and residuals are `f_k = eps_k exp(A_k0 Omega_0 + A_k1 Omega_1 + s_k w_k)`
//! and `e_j = eta_j exp(B_j0 Omega_0 + B_j1 Omega_1 + s~_j w~_j)`. `Omega_0` has
//! unit variance, skewness `zeta0` and excess kurtosis `kappa0`; `Omega_1` and
//! the idiosyncratic log-vols are Gaussian.
//!
//! The model predicts the log-abs correlations of `nlcorr` in closed form via
//! a quartic cumulant expansion of the `Omega_0` moment generating function,
//! or optionally via the exact MGF of the matched Beta law ([`MgfClosure`]).
//! Calibration fits `A, s, zeta0, kappa0` on the factor-factor block across the
//! whole p-grid, then `B` (and `s~`) on the factor-residual and/or
//! residual-residual blocks at a single order `p*`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::write_file;
use crate::error::{Error, Result};
use crate::linalg;
use crate::linfactor::FactorSeries;
use crate::nlcorr::{NonlinCorrSet, ZERO_CLAMP};
use crate::optim::{self, LbfgsOptions, Objective, OptimReport};
use crate::simengine::{beta_feasible, ln_hyp1f1, omega_law, InfeasiblePolicy, OmegaLaw};

/// Bounds on the non-Gaussianity of `Omega_0`.
pub const ZETA_BOUND: f64 = 5.0;
pub const KAPPA_BOUND: f64 = 10.0;

/// `p^-2 ln( E|e|^{2p} / (E|e|^p)^2 )` for a standard Gaussian `e`.
pub fn gamma_p(p: f64) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Domain(format!("gamma_p needs p > 0, got {p}")));
    }
    let half_ln_pi = 0.5 * std::f64::consts::PI.ln();
    let log_ratio = half_ln_pi + ln_gamma(0.5 + p) - 2.0 * ln_gamma(0.5 * (1.0 + p));
    Ok(log_ratio / (p * p))
}

/// Log MGF ratio `p^-2 ln Phi_0(pa, pb)` under the quartic cumulant expansion.
pub fn phi0(a: f64, b: f64, p: f64, zeta0: f64, kappa0: f64) -> f64 {
    a * b
        + 0.5 * p * zeta0 * (a * a * b + a * b * b)
        + p * p / 12.0 * kappa0 * (2.0 * a * a * a * b + 3.0 * a * a * b * b + 2.0 * a * b * b * b)
}

/// `phi0` and its partial derivatives with respect to `(a, b, zeta0, kappa0)`.
#[derive(Debug, Clone, Copy)]
pub struct Phi0Grad {
    pub value: f64,
    pub da: f64,
    pub db: f64,
    pub dzeta: f64,
    pub dkappa: f64,
}

pub fn phi0_grad(a: f64, b: f64, p: f64, zeta0: f64, kappa0: f64) -> Phi0Grad {
    let c3 = 0.5 * p;
    let c4 = p * p / 12.0;
    let cub = a * a * b + a * b * b;
    let quart = 2.0 * a * a * a * b + 3.0 * a * a * b * b + 2.0 * a * b * b * b;
    Phi0Grad {
        value: a * b + c3 * zeta0 * cub + c4 * kappa0 * quart,
        da: b + c3 * zeta0 * (2.0 * a * b + b * b)
            + c4 * kappa0 * (6.0 * a * a * b + 6.0 * a * b * b + 2.0 * b * b * b),
        db: a + c3 * zeta0 * (a * a + 2.0 * a * b)
            + c4 * kappa0 * (2.0 * a * a * a + 6.0 * a * a * b + 6.0 * a * b * b),
        dzeta: c3 * cub,
        dkappa: c4 * quart,
    }
}

/// `ln E[exp(t Omega_0)]` truncated after the fourth cumulant.
pub fn log_mgf_omega0(t: f64, zeta0: f64, kappa0: f64) -> f64 {
    0.5 * t * t + zeta0 / 6.0 * t.powi(3) + kappa0 / 24.0 * t.powi(4)
}

/// How the MGF ratio `Phi_0` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MgfClosure {
    /// Quartic cumulant expansion ([`phi0`]).
    #[default]
    Cumulant,
    /// Exact MGF of the Beta law matched to `(zeta0, kappa0)`. Calibration
    /// then keeps the moments inside the Beta region.
    BetaLaw,
}

impl std::str::FromStr for MgfClosure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulant" => Ok(MgfClosure::Cumulant),
            "beta-law" => Ok(MgfClosure::BetaLaw),
            other => Err(Error::Config(format!("unknown MGF closure `{other}`"))),
        }
    }
}

const MOMENT_STEP: f64 = 1e-5;

/// `ln E[exp(t Omega_0)]` and its derivative in `t`.
fn law_ln_mgf(law: &OmegaLaw, t: f64) -> (f64, f64) {
    match *law {
        OmegaLaw::Gaussian { .. } => (0.5 * t * t, t),
        OmegaLaw::Beta(bp) => {
            let c = bp.alpha + bp.beta;
            let z = t * bp.scale;
            let ln0 = ln_hyp1f1(bp.alpha, c, z);
            let ratio = bp.alpha / c * (ln_hyp1f1(bp.alpha + 1.0, c + 1.0, z) - ln0).exp();
            (t * bp.shift + ln0, bp.shift + bp.scale * ratio)
        }
    }
}

/// Laws at `x - h` and `x + h` along one moment; a side that leaves the
/// Beta region collapses onto the centre.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    lo: OmegaLaw,
    hi: OmegaLaw,
    width: f64,
}

impl Stencil {
    fn new(center: OmegaLaw, at: impl Fn(f64) -> Result<OmegaLaw>) -> Self {
        let lo = at(-MOMENT_STEP).ok();
        let hi = at(MOMENT_STEP).ok();
        let width = MOMENT_STEP * (lo.is_some() as u8 + hi.is_some() as u8) as f64;
        Stencil {
            lo: lo.unwrap_or(center),
            hi: hi.unwrap_or(center),
            width,
        }
    }

    fn slope(&self, t: f64) -> f64 {
        if self.width == 0.0 {
            return 0.0;
        }
        (law_ln_mgf(&self.hi, t).0 - law_ln_mgf(&self.lo, t).0) / self.width
    }
}

#[derive(Debug, Clone, Copy)]
struct ExactLaws {
    center: OmegaLaw,
    zeta: Stencil,
    kappa: Stencil,
}

/// `p^-2 ln Phi_0(pa, pb)` and its gradient at fixed `(zeta0, kappa0)` under
/// a chosen closure.
#[derive(Debug, Clone, Copy)]
pub struct Phi0Closure {
    zeta0: f64,
    kappa0: f64,
    exact: Option<ExactLaws>,
}

impl Phi0Closure {
    pub fn new(closure: MgfClosure, zeta0: f64, kappa0: f64) -> Result<Self> {
        let exact = match closure {
            MgfClosure::Cumulant => None,
            MgfClosure::BetaLaw => {
                let law = |z: f64, k: f64| omega_law(z, k, InfeasiblePolicy::Error);
                let center = law(zeta0, kappa0)?;
                Some(ExactLaws {
                    center,
                    zeta: Stencil::new(center, |h| law(zeta0 + h, kappa0)),
                    kappa: Stencil::new(center, |h| law(zeta0, kappa0 + h)),
                })
            }
        };
        Ok(Phi0Closure { zeta0, kappa0, exact })
    }

    pub fn value(&self, a: f64, b: f64, p: f64) -> f64 {
        match &self.exact {
            None => phi0(a, b, p, self.zeta0, self.kappa0),
            Some(e) => {
                let l = |t: f64| law_ln_mgf(&e.center, t).0;
                (l(p * (a + b)) - l(p * a) - l(p * b)) / (p * p)
            }
        }
    }

    pub fn grad(&self, a: f64, b: f64, p: f64) -> Phi0Grad {
        self.eval(a, b, p, true)
    }

    /// As [`Phi0Closure::grad`]; the moment derivatives are left at zero
    /// unless `moments` is set.
    fn eval(&self, a: f64, b: f64, p: f64, moments: bool) -> Phi0Grad {
        let Some(e) = &self.exact else {
            return phi0_grad(a, b, p, self.zeta0, self.kappa0);
        };
        let ts = [p * (a + b), p * a, p * b];
        let [(l0, d0), (l1, d1), (l2, d2)] = ts.map(|t| law_ln_mgf(&e.center, t));
        let p2 = p * p;
        let mut g = Phi0Grad {
            value: (l0 - l1 - l2) / p2,
            da: (d0 - d1) / p,
            db: (d0 - d2) / p,
            dzeta: 0.0,
            dkappa: 0.0,
        };
        if moments {
            let combine = |s: &Stencil| (s.slope(ts[0]) - s.slope(ts[1]) - s.slope(ts[2])) / p2;
            g.dzeta = combine(&e.zeta);
            g.dkappa = combine(&e.kappa);
        }
        g
    }
}

/// Parameters of the one- or two-mode volatility model.
#[derive(Debug, Clone, PartialEq)]
pub struct VolModel {
    /// M×K factor log-vol loadings.
    pub a: DMatrix<f64>,
    /// N×K residual log-vol loadings.
    pub b: DMatrix<f64>,
    /// Idiosyncratic log-vol scales of the factors (length M).
    pub s: Vec<f64>,
    /// Idiosyncratic log-vol scales of the residuals (length N).
    pub s_tilde: Vec<f64>,
    pub zeta0: f64,
    pub kappa0: f64,
}

impl VolModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        s: Vec<f64>,
        s_tilde: Vec<f64>,
        zeta0: f64,
        kappa0: f64,
    ) -> Result<Self> {
        let k = a.ncols();
        if !(k == 1 || k == 2) || b.ncols() != k {
            return Err(Error::Dimension(format!(
                "volatility modes must be 1 or 2 for both loadings, got {} and {}",
                a.ncols(),
                b.ncols()
            )));
        }
        if s.len() != a.nrows() || s_tilde.len() != b.nrows() {
            return Err(Error::Dimension("scale vectors do not match loadings".into()));
        }
        if s.iter().chain(&s_tilde).any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain("log-vol scales must be finite and >= 0".into()));
        }
        if kappa0 < zeta0 * zeta0 - 2.0 - 1e-12 {
            return Err(Error::Domain(format!(
                "kappa0 = {kappa0} below the moment bound zeta0^2 - 2 = {}",
                zeta0 * zeta0 - 2.0
            )));
        }
        Ok(VolModel {
            a,
            b,
            s,
            s_tilde,
            zeta0,
            kappa0,
        })
    }

    /// Model with every volatility parameter zero (Gaussian factors and residuals).
    pub fn gaussian(m: usize, n: usize, k: usize) -> Self {
        VolModel {
            a: DMatrix::zeros(m, k),
            b: DMatrix::zeros(n, k),
            s: vec![0.0; m],
            s_tilde: vec![0.0; n],
            zeta0: 0.0,
            kappa0: 0.0,
        }
    }

    /// One-mode model with uniform parameters.
    pub fn uniform(m: usize, n: usize, a: f64, b: f64, s: f64, s_tilde: f64, zeta0: f64, kappa0: f64) -> Self {
        VolModel {
            a: DMatrix::from_element(m, 1, a),
            b: DMatrix::from_element(n, 1, b),
            s: vec![s; m],
            s_tilde: vec![s_tilde; n],
            zeta0,
            kappa0,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_factors(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.b.nrows()
    }
}

/// Predicted factor-factor, factor-residual and residual-residual matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelNlcorr {
    pub ff: DMatrix<f64>,
    pub fr: DMatrix<f64>,
    pub rr: DMatrix<f64>,
}

fn pair_value(x: &DMatrix<f64>, i: usize, y: &DMatrix<f64>, j: usize, p: f64, phi: &Phi0Closure) -> f64 {
    let mut v = phi.value(x[(i, 0)], y[(j, 0)], p);
    if x.ncols() == 2 {
        v += x[(i, 1)] * y[(j, 1)];
    }
    v
}

/// Closed-form log-abs correlations implied by `vol` at order `p`.
/// A second mode enters as an independent Gaussian driver.
pub fn model_nlcorr(vol: &VolModel, p: f64) -> Result<ModelNlcorr> {
    model_nlcorr_with(vol, p, MgfClosure::Cumulant)
}

/// [`model_nlcorr`] under a chosen closure.
pub fn model_nlcorr_with(vol: &VolModel, p: f64, closure: MgfClosure) -> Result<ModelNlcorr> {
    let g = gamma_p(p)?;
    let phi = Phi0Closure::new(closure, vol.zeta0, vol.kappa0)?;
    let m = vol.n_factors();
    let n = vol.n_assets();
    let mut ff = DMatrix::zeros(m, m);
    for k in 0..m {
        for l in k..m {
            let mut v = pair_value(&vol.a, k, &vol.a, l, p, &phi);
            if k == l {
                v += g + vol.s[k] * vol.s[k];
            }
            ff[(k, l)] = v;
            ff[(l, k)] = v;
        }
    }
    let fr = DMatrix::from_fn(m, n, |k, i| pair_value(&vol.a, k, &vol.b, i, p, &phi));
    let mut rr = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut v = pair_value(&vol.b, i, &vol.b, j, p, &phi);
            if i == j {
                v += g + vol.s_tilde[i] * vol.s_tilde[i];
            }
            rr[(i, j)] = v;
            rr[(j, i)] = v;
        }
    }
    Ok(ModelNlcorr { ff, fr, rr })
}

// ---------------------------------------------------------------------------
// Factor-level calibration
// ---------------------------------------------------------------------------

/// Squared mismatch between empirical and modeled factor-factor matrices,
/// summed over the grid, plus the mode-overlap penalty when K = 2.
///
/// Parameter layout: `A` column-major (M×K), then `s` (M), then `zeta0`, `kappa0`.
#[derive(Debug, Clone)]
pub struct FactorVolLoss {
    targets: Vec<DMatrix<f64>>,
    p_grid: Vec<f64>,
    gammas: Vec<f64>,
    m: usize,
    k: usize,
    overlap_weight: f64,
    closure: MgfClosure,
}

impl FactorVolLoss {
    pub fn new(set: &NonlinCorrSet, k: usize, overlap_weight: f64) -> Result<Self> {
        let gammas = set.p_grid.iter().map(|&p| gamma_p(p)).collect::<Result<_>>()?;
        Ok(FactorVolLoss {
            targets: set.cff.clone(),
            p_grid: set.p_grid.clone(),
            gammas,
            m: set.n_factors(),
            k,
            overlap_weight,
            closure: MgfClosure::Cumulant,
        })
    }

    pub fn with_closure(mut self, closure: MgfClosure) -> Self {
        self.closure = closure;
        self
    }

    pub fn pack(a: &DMatrix<f64>, s: &[f64], zeta0: f64, kappa0: f64) -> Vec<f64> {
        let mut x = a.as_slice().to_vec();
        x.extend_from_slice(s);
        x.push(zeta0);
        x.push(kappa0);
        x
    }

    pub fn unpack(&self, x: &[f64]) -> (DMatrix<f64>, Vec<f64>, f64, f64) {
        let na = self.m * self.k;
        let a = DMatrix::from_column_slice(self.m, self.k, &x[..na]);
        let s = x[na..na + self.m].to_vec();
        (a, s, x[na + self.m], x[na + self.m + 1])
    }
}

impl Objective for FactorVolLoss {
    fn dim(&self) -> usize {
        self.m * self.k + self.m + 2
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let m = self.m;
        let na = m * self.k;
        let (zi, ki) = (na + m, na + m + 1);
        let zeta = x[zi];
        let kappa = x[ki];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let Ok(phi) = Phi0Closure::new(self.closure, zeta, kappa) else {
            return f64::INFINITY;
        };
        let mut loss = 0.0;
        for (pi, &p) in self.p_grid.iter().enumerate() {
            let target = &self.targets[pi];
            for l in 0..m {
                for k in 0..m {
                    let ph = phi.grad(x[k], x[l], p);
                    let mut model = ph.value;
                    if self.k == 2 {
                        model += x[m + k] * x[m + l];
                    }
                    if k == l {
                        model += self.gammas[pi] + x[na + k] * x[na + k];
                    }
                    let r = target[(k, l)] - model;
                    loss += r * r;
                    let c = -2.0 * r;
                    grad[k] += c * ph.da;
                    grad[l] += c * ph.db;
                    if self.k == 2 {
                        grad[m + k] += c * x[m + l];
                        grad[m + l] += c * x[m + k];
                    }
                    if k == l {
                        grad[na + k] += c * 2.0 * x[na + k];
                    }
                    grad[zi] += c * ph.dzeta;
                    grad[ki] += c * ph.dkappa;
                }
            }
        }
        if self.k == 2 {
            let overlap: f64 = (0..m).map(|k| x[k] * x[m + k]).sum();
            loss += self.overlap_weight * overlap * overlap;
            for k in 0..m {
                grad[k] += 2.0 * self.overlap_weight * overlap * x[m + k];
                grad[m + k] += 2.0 * self.overlap_weight * overlap * x[k];
            }
        }
        loss
    }
}

/// Smooth map from unconstrained `(z, c)` to feasible `(zeta0, kappa0)`:
/// `zeta0 = Z tanh(z / Z)` and `kappa0 = zeta0^2 - 2 + softplus(c)`, or
/// `kappa0 = zeta0^2 - 2 + (2 + zeta0^2 / 2) sigmoid(c)` inside the Beta
/// region. A quadratic penalty keeps `kappa0 <= KAPPA_BOUND`.
#[derive(Debug, Clone, Copy)]
struct MomentMap(MgfClosure);

impl MomentMap {
    fn softplus(c: f64) -> f64 {
        if c > 30.0 {
            c
        } else {
            c.exp().ln_1p()
        }
    }

    fn sigmoid(c: f64) -> f64 {
        1.0 / (1.0 + (-c).exp())
    }

    fn forward(&self, z: f64, c: f64) -> (f64, f64) {
        let zeta = ZETA_BOUND * (z / ZETA_BOUND).tanh();
        let gap = match self.0 {
            MgfClosure::Cumulant => Self::softplus(c),
            MgfClosure::BetaLaw => (2.0 + 0.5 * zeta * zeta) * Self::sigmoid(c),
        };
        (zeta, zeta * zeta - 2.0 + gap)
    }

    /// `(d zeta / dz, d kappa / d zeta, d kappa / dc)`.
    fn partials(&self, z: f64, c: f64) -> (f64, f64, f64) {
        let zeta = ZETA_BOUND * (z / ZETA_BOUND).tanh();
        let dzeta = 1.0 - (z / ZETA_BOUND).tanh().powi(2);
        let sg = Self::sigmoid(c);
        match self.0 {
            MgfClosure::Cumulant => (dzeta, 2.0 * zeta, sg),
            MgfClosure::BetaLaw => (dzeta, (2.0 + sg) * zeta, (2.0 + 0.5 * zeta * zeta) * sg * (1.0 - sg)),
        }
    }

    fn inverse(&self, zeta: f64, kappa: f64) -> (f64, f64) {
        let zc = zeta.clamp(-0.999 * ZETA_BOUND, 0.999 * ZETA_BOUND);
        let z = ZETA_BOUND * (zc / ZETA_BOUND).atanh();
        let gap = kappa - (zc * zc - 2.0);
        let c = match self.0 {
            MgfClosure::Cumulant => {
                let gap = gap.max(1e-6);
                if gap > 30.0 {
                    gap
                } else {
                    gap.exp_m1().ln()
                }
            }
            MgfClosure::BetaLaw => {
                let frac = (gap / (2.0 + 0.5 * zc * zc)).clamp(1e-4, 1.0 - 1e-4);
                (frac / (1.0 - frac)).ln()
            }
        };
        (z, c)
    }
}

struct Reparam<'a, O: Objective> {
    inner: &'a O,
    zeta_index: usize,
    map: MomentMap,
}

impl<O: Objective> Objective for Reparam<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, y: &[f64], grad: &mut [f64]) -> f64 {
        let zi = self.zeta_index;
        let (z, c) = (y[zi], y[zi + 1]);
        let (zeta, kappa) = self.map.forward(z, c);
        let mut x = y.to_vec();
        x[zi] = zeta;
        x[zi + 1] = kappa;
        let mut loss = self.inner.eval(&x, grad);
        let mut dkappa = grad[zi + 1];
        let excess = kappa - KAPPA_BOUND;
        if excess > 0.0 {
            loss += 1e3 * excess * excess;
            dkappa += 2e3 * excess;
        }
        let (dzeta_dz, dkappa_dzeta, dkappa_dc) = self.map.partials(z, c);
        grad[zi] = (grad[zi] + dkappa * dkappa_dzeta) * dzeta_dz;
        grad[zi + 1] = dkappa * dkappa_dc;
        loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolCalibration {
    pub lbfgs: LbfgsOptions,
    /// Weight of the mode-overlap penalty; `None` uses the mean squared
    /// off-diagonal factor-factor correlation.
    pub overlap_weight: Option<f64>,
    pub closure: MgfClosure,
}

impl Default for VolCalibration {
    fn default() -> Self {
        VolCalibration {
            lbfgs: LbfgsOptions::default(),
            overlap_weight: None,
            closure: MgfClosure::Cumulant,
        }
    }
}

fn mean_square_off_diagonal(cff: &[DMatrix<f64>]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for c in cff {
        let m = c.nrows();
        for k in 0..m {
            for l in (0..m).filter(|&l| l != k) {
                sum += c[(k, l)] * c[(k, l)];
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Minimizes `loss` from `x0` (natural parameters) through the moment map.
fn fit_factor(
    loss: &FactorVolLoss,
    x0: &[f64],
    closure: MgfClosure,
    opts: &VolCalibration,
) -> (Vec<f64>, OptimReport) {
    let zi = loss.m * loss.k + loss.m;
    let map = MomentMap(closure);
    let mut y0 = x0.to_vec();
    (y0[zi], y0[zi + 1]) = map.inverse(x0[zi], x0[zi + 1]);
    let wrapped = Reparam {
        inner: loss,
        zeta_index: zi,
        map,
    };
    let (mut y, report) = optim::minimize(&wrapped, &y0, opts.lbfgs);
    (y[zi], y[zi + 1]) = map.forward(y[zi], y[zi + 1]);
    (y, report)
}

/// Top-K eigenvectors of a p-averaged matrix after removing the Gaussian
/// diagonal offset, scaled by the square root of their eigenvalues.
fn spectral_prior(mean: &DMatrix<f64>, mean_gamma: f64, k: usize) -> DMatrix<f64> {
    let mut c = mean.clone();
    for i in 0..c.nrows() {
        c[(i, i)] -= mean_gamma;
    }
    let eig = linalg::sym_eigen(&c);
    DMatrix::from_fn(c.nrows(), k, |i, j| eig.values[j].max(0.0).sqrt() * eig.vectors[(i, j)])
}

fn mean_gamma(p_grid: &[f64]) -> Result<f64> {
    let gs = p_grid.iter().map(|&p| gamma_p(p)).collect::<Result<Vec<_>>>()?;
    Ok(gs.iter().sum::<f64>() / gs.len() as f64)
}

fn check_modes(k: usize) -> Result<()> {
    if k == 1 || k == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("volatility modes must be 1 or 2, got {k}")))
    }
}

/// Fits `A`, `s`, `zeta0`, `kappa0` on the factor-factor matrices.
/// The returned model has zero residual loadings and scales.
pub fn calibrate_factor_vol(
    set: &NonlinCorrSet,
    k: usize,
    opts: &VolCalibration,
) -> Result<(VolModel, OptimReport)> {
    check_modes(k)?;
    let m = set.n_factors();
    let n = set.n_assets();
    if m < k {
        return Err(Error::Rank(format!("{k} volatility modes for {m} factors")));
    }
    let g_mean = mean_gamma(&set.p_grid)?;
    let mean = set.mean_cff();
    let a0 = spectral_prior(&mean, g_mean, k);
    let s0: Vec<f64> = (0..m)
        .map(|i| {
            let explained: f64 = (0..k).map(|j| a0[(i, j)] * a0[(i, j)]).sum();
            (mean[(i, i)] - g_mean - explained).max(0.0025).sqrt()
        })
        .collect();
    let overlap_weight = opts.overlap_weight.unwrap_or_else(|| mean_square_off_diagonal(&set.cff));
    let cumulant = FactorVolLoss::new(set, k, overlap_weight)?;
    let x0 = FactorVolLoss::pack(&a0, &s0, 0.0, 0.0);
    let (mut x, mut report) = fit_factor(&cumulant, &x0, MgfClosure::Cumulant, opts);
    let loss = cumulant.with_closure(opts.closure);
    if opts.closure == MgfClosure::BetaLaw {
        // Warm start from the cumulant fit, moved inside the Beta region.
        let zi = m * k + m;
        let (zeta, kappa) = (x[zi], x[zi + 1]);
        if !beta_feasible(zeta, kappa) {
            let z2 = zeta * zeta;
            let margin = 0.02 * (2.0 + 0.5 * z2);
            x[zi + 1] = kappa.clamp(z2 - 2.0 + margin, 1.5 * z2 - margin);
        }
        let (xb, rb) = fit_factor(&loss, &x, MgfClosure::BetaLaw, opts);
        x = xb;
        report = OptimReport {
            iterations: report.iterations + rb.iterations,
            initial_loss: report.initial_loss,
            ..rb
        };
    }
    let (mut a, s, mut zeta0, kappa0) = loss.unpack(&x);
    // (A0, zeta0) -> (-A0, -zeta0) leaves every prediction unchanged.
    if a.column(0).sum() < 0.0 {
        a.column_mut(0).neg_mut();
        zeta0 = -zeta0;
    }
    if k == 2 {
        let mut col: Vec<f64> = a.column(1).iter().copied().collect();
        if linalg::orient(&mut col) {
            a.column_mut(1).neg_mut();
        }
    }
    let s = s.iter().map(|v| v.abs()).collect();
    let vol = VolModel::new(a, DMatrix::zeros(n, k), s, vec![0.0; n], zeta0, kappa0)?;
    let mut scratch = vec![0.0; loss.dim()];
    let final_loss = loss.eval(
        &FactorVolLoss::pack(&vol.a, &vol.s, vol.zeta0, vol.kappa0),
        &mut scratch,
    );
    Ok((vol, OptimReport { loss: final_loss, ..report }))
}

// ---------------------------------------------------------------------------
// Residual-level calibration
// ---------------------------------------------------------------------------

/// Which blocks drive the residual loadings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualFit {
    /// Factor-residual block only; fits `B`.
    FacRes,
    /// Residual-residual block; fits `B` and `s~`.
    ResRes,
    /// Both blocks; fits `B` and `s~`.
    Joint,
}

impl std::str::FromStr for ResidualFit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fac-res" => Ok(ResidualFit::FacRes),
            "res-res" => Ok(ResidualFit::ResRes),
            "joint" => Ok(ResidualFit::Joint),
            other => Err(Error::Config(format!("unknown residual fit mode `{other}`"))),
        }
    }
}

/// Squared mismatch of the factor-residual and/or residual-residual blocks
/// at one order, as a function of `B` (column-major N×K) and, unless the
/// mode is [`ResidualFit::FacRes`], `s~` (N).
#[derive(Debug, Clone)]
pub struct ResidualVolLoss {
    fr: DMatrix<f64>,
    rr: DMatrix<f64>,
    a: DMatrix<f64>,
    p: f64,
    gamma: f64,
    zeta0: f64,
    kappa0: f64,
    mode: ResidualFit,
    closure: MgfClosure,
}

impl ResidualVolLoss {
    pub fn new(
        set: &NonlinCorrSet,
        partial: &VolModel,
        p_star: f64,
        mode: ResidualFit,
    ) -> Result<Self> {
        let idx = set.index_of(p_star).ok_or_else(|| {
            Error::Domain(format!("order p* = {p_star} is not in the correlation grid"))
        })?;
        Ok(ResidualVolLoss {
            fr: set.cfr[idx].clone(),
            rr: set.crr[idx].clone(),
            a: partial.a.clone(),
            p: p_star,
            gamma: gamma_p(p_star)?,
            zeta0: partial.zeta0,
            kappa0: partial.kappa0,
            mode,
            closure: MgfClosure::Cumulant,
        })
    }

    pub fn with_closure(mut self, closure: MgfClosure) -> Self {
        self.closure = closure;
        self
    }

    fn n(&self) -> usize {
        self.rr.nrows()
    }

    fn k(&self) -> usize {
        self.a.ncols()
    }

    fn fits_scales(&self) -> bool {
        self.mode != ResidualFit::FacRes
    }
}

impl Objective for ResidualVolLoss {
    fn dim(&self) -> usize {
        self.n() * self.k() + if self.fits_scales() { self.n() } else { 0 }
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.n();
        let kk = self.k();
        let m = self.a.nrows();
        let nb = n * kk;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let p = self.p;
        let Ok(phi) = Phi0Closure::new(self.closure, self.zeta0, self.kappa0) else {
            return f64::INFINITY;
        };
        let mut loss = 0.0;
        if self.mode != ResidualFit::ResRes {
            for i in 0..n {
                for k in 0..m {
                    let ph = phi.eval(self.a[(k, 0)], x[i], p, false);
                    let mut model = ph.value;
                    if kk == 2 {
                        model += self.a[(k, 1)] * x[n + i];
                    }
                    let r = self.fr[(k, i)] - model;
                    loss += r * r;
                    grad[i] += -2.0 * r * ph.db;
                    if kk == 2 {
                        grad[n + i] += -2.0 * r * self.a[(k, 1)];
                    }
                }
            }
        }
        if self.mode != ResidualFit::FacRes {
            for j in 0..n {
                for i in 0..n {
                    let ph = phi.eval(x[i], x[j], p, false);
                    let mut model = ph.value;
                    if kk == 2 {
                        model += x[n + i] * x[n + j];
                    }
                    if i == j {
                        model += self.gamma + x[nb + i] * x[nb + i];
                    }
                    let r = self.rr[(i, j)] - model;
                    loss += r * r;
                    let c = -2.0 * r;
                    grad[i] += c * ph.da;
                    grad[j] += c * ph.db;
                    if kk == 2 {
                        grad[n + i] += c * x[n + j];
                        grad[n + j] += c * x[n + i];
                    }
                    if i == j {
                        grad[nb + i] += c * 2.0 * x[nb + i];
                    }
                }
            }
        }
        loss
    }
}

/// Fits the residual loadings `B` (and `s~`) at order `p_star`, keeping the
/// factor-level parameters of `partial` fixed.
pub fn calibrate_residual_vol(
    set: &NonlinCorrSet,
    partial: &VolModel,
    p_star: f64,
    mode: ResidualFit,
    opts: &VolCalibration,
) -> Result<(VolModel, OptimReport)> {
    let k = partial.n_modes();
    let n = set.n_assets();
    if partial.n_factors() != set.n_factors() {
        return Err(Error::Dimension(format!(
            "model has {} factors, correlations {}",
            partial.n_factors(),
            set.n_factors()
        )));
    }
    let loss = ResidualVolLoss::new(set, partial, p_star, mode)?.with_closure(opts.closure);
    let phi = Phi0Closure::new(opts.closure, partial.zeta0, partial.kappa0)?;
    let g_mean = mean_gamma(&set.p_grid)?;
    let mean_rr = set.mean_crr();
    let mut b0 = spectral_prior(&mean_rr, g_mean, k);
    // Orient the residual modes like the factor modes they couple to.
    let idx = set.index_of(p_star).expect("checked by loss");
    for j in 0..k {
        let coupling: f64 = (0..n)
            .map(|i| {
                (0..partial.n_factors())
                    .map(|f| partial.a[(f, j)] * set.cfr[idx][(f, i)])
                    .sum::<f64>()
                    * b0[(i, j)]
            })
            .sum();
        if coupling < 0.0 {
            b0.column_mut(j).neg_mut();
        }
    }
    let mut x0 = b0.as_slice().to_vec();
    if loss.fits_scales() {
        x0.extend((0..n).map(|i| {
            let explained: f64 = (0..k).map(|j| b0[(i, j)] * b0[(i, j)]).sum();
            (set.crr[idx][(i, i)] - loss.gamma - explained).max(0.0025).sqrt()
        }));
    }
    let (x, report) = optim::minimize(&loss, &x0, opts.lbfgs);
    let b = DMatrix::from_column_slice(n, k, &x[..n * k]);
    let s_tilde: Vec<f64> = if loss.fits_scales() {
        x[n * k..].iter().map(|v| v.abs()).collect()
    } else {
        // Scales are not identified by the factor-residual block; read them
        // off the residual diagonal.
        (0..n)
            .map(|i| {
                let mut explained = phi.value(b[(i, 0)], b[(i, 0)], p_star);
                if k == 2 {
                    explained += b[(i, 1)] * b[(i, 1)];
                }
                (set.crr[idx][(i, i)] - loss.gamma - explained).max(0.0).sqrt()
            })
            .collect()
    };
    let vol = VolModel::new(
        partial.a.clone(),
        b,
        partial.s.clone(),
        s_tilde,
        partial.zeta0,
        partial.kappa0,
    )?;
    Ok((vol, report))
}

/// Settings for the full volatility calibration of [`calibrate_nested`].
#[derive(Debug, Clone, PartialEq)]
pub struct NestedVolOptions {
    pub n_modes: usize,
    pub p_grid: Vec<f64>,
    pub p_star: f64,
    pub residual_fit: ResidualFit,
    pub calibration: VolCalibration,
}

impl Default for NestedVolOptions {
    fn default() -> Self {
        NestedVolOptions {
            n_modes: 1,
            p_grid: crate::nlcorr::default_p_grid(),
            p_star: 1.0,
            residual_fit: ResidualFit::Joint,
            calibration: VolCalibration::default(),
        }
    }
}

/// Output of [`calibrate_nested`].
#[derive(Debug, Clone)]
pub struct NestedVolFit {
    pub vol: VolModel,
    /// Correlations on the grid used for the factor-level fit.
    pub nlcorr: NonlinCorrSet,
    /// Correlations at `p_star` used for the residual-level fit.
    pub nlcorr_star: NonlinCorrSet,
    pub factor_report: OptimReport,
    pub residual_report: OptimReport,
}

/// Log-abs correlations on the grid, factor-level fit, then residual-level
/// fit at `p_star`; the order `p_star` is estimated separately when it is
/// not on the grid.
pub fn calibrate_nested(series: &FactorSeries, opts: &NestedVolOptions) -> Result<NestedVolFit> {
    let nlcorr = crate::nlcorr::estimate_nlcorr(series, &opts.p_grid)?;
    let nlcorr_star = match nlcorr.index_of(opts.p_star) {
        Some(i) => NonlinCorrSet {
            p_grid: vec![opts.p_star],
            cff: vec![nlcorr.cff[i].clone()],
            crr: vec![nlcorr.crr[i].clone()],
            cfr: vec![nlcorr.cfr[i].clone()],
            clamped: nlcorr.clamped,
        },
        None => crate::nlcorr::estimate_nlcorr(series, &[opts.p_star])?,
    };
    let (partial, factor_report) = calibrate_factor_vol(&nlcorr, opts.n_modes, &opts.calibration)?;
    if !factor_report.converged {
        log::warn!("factor volatility fit stopped after {} iterations", factor_report.iterations);
    }
    let (vol, residual_report) =
        calibrate_residual_vol(&nlcorr_star, &partial, opts.p_star, opts.residual_fit, &opts.calibration)?;
    if !residual_report.converged {
        log::warn!("residual volatility fit stopped after {} iterations", residual_report.iterations);
    }
    Ok(NestedVolFit {
        vol,
        nlcorr,
        nlcorr_star,
        factor_report,
        residual_report,
    })
}

// ---------------------------------------------------------------------------
// Driver reconstruction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaSource {
    FactorRegression,
    ResidualRegression,
}

/// Reconstructed common log-vol driver(s).
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaSeries {
    pub omega0: Vec<f64>,
    pub omega1: Option<Vec<f64>>,
    pub source: OmegaSource,
}

/// Both determinations; `residual` is the canonical one.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaReconstruction {
    pub factor: OmegaSeries,
    pub residual: OmegaSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaWeighting {
    /// Plain least squares.
    #[default]
    Ordinary,
    /// Observations weighted by `1 / max(s^2, 1e-3)`.
    InverseVariance,
}

fn centered_log_abs(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.nrows() as f64;
    let mut y = x.map(|v| v.abs().max(ZERO_CLAMP).ln());
    for mut col in y.column_iter_mut() {
        let mean = col.sum() / t;
        col.add_scalar_mut(-mean);
    }
    y
}

fn regress_dates(
    y: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    scales: &[f64],
    weighting: OmegaWeighting,
    source: OmegaSource,
) -> Result<OmegaSeries> {
    let w: Vec<f64> = match weighting {
        OmegaWeighting::Ordinary => vec![1.0; scales.len()],
        OmegaWeighting::InverseVariance => scales.iter().map(|s| 1.0 / (s * s).max(1e-3)).collect(),
    };
    let mut xw = loadings.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let normal = loadings.tr_mul(&xw);
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Singularity("volatility loadings are degenerate".into()))?;
    // Omega (T×K) = Y W X (X^T W X)^-1
    let rhs = (y * &xw).transpose();
    let omega = chol.solve(&rhs).transpose();
    Ok(OmegaSeries {
        omega0: omega.column(0).iter().copied().collect(),
        omega1: (loadings.ncols() == 2).then(|| omega.column(1).iter().copied().collect()),
        source,
    })
}

/// Date-by-date regressions of the centered log-amplitudes of factors on `A`
/// and of residuals on `B`.
pub fn reconstruct_omega(
    series: &FactorSeries,
    vol: &VolModel,
    weighting: OmegaWeighting,
) -> Result<OmegaReconstruction> {
    if series.factors.ncols() != vol.n_factors() || series.residuals.ncols() != vol.n_assets() {
        return Err(Error::Dimension("series do not match the volatility model".into()));
    }
    let factor = regress_dates(
        &centered_log_abs(&series.factors),
        &vol.a,
        &vol.s,
        weighting,
        OmegaSource::FactorRegression,
    )?;
    let residual = regress_dates(
        &centered_log_abs(&series.residuals),
        &vol.b,
        &vol.s_tilde,
        weighting,
        OmegaSource::ResidualRegression,
    )?;
    Ok(OmegaReconstruction { factor, residual })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct VolModelFile {
    scalars: ScalarSection,
    factor: LoadingSection,
    residual: LoadingSection,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScalarSection {
    n_modes: usize,
    zeta0: f64,
    kappa0: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoadingSection {
    mode0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode1: Option<Vec<f64>>,
    scales: Vec<f64>,
}

fn section(m: &DMatrix<f64>, scales: &[f64]) -> LoadingSection {
    LoadingSection {
        mode0: m.column(0).iter().copied().collect(),
        mode1: (m.ncols() == 2).then(|| m.column(1).iter().copied().collect()),
        scales: scales.to_vec(),
    }
}

fn unsection(s: &LoadingSection, k: usize) -> Result<DMatrix<f64>> {
    let n = s.mode0.len();
    let mut m = DMatrix::zeros(n, k);
    m.column_mut(0).copy_from_slice(&s.mode0);
    if k == 2 {
        let m1 = s
            .mode1
            .as_ref()
            .ok_or_else(|| Error::Toml("two-mode model without `mode1` loadings".into()))?;
        if m1.len() != n {
            return Err(Error::Toml("mode1 length differs from mode0".into()));
        }
        m.column_mut(1).copy_from_slice(m1);
    }
    Ok(m)
}

impl VolModel {
    pub(crate) fn to_file(&self) -> VolModelFile {
        VolModelFile {
            scalars: ScalarSection {
                n_modes: self.n_modes(),
                zeta0: self.zeta0,
                kappa0: self.kappa0,
            },
            factor: section(&self.a, &self.s),
            residual: section(&self.b, &self.s_tilde),
        }
    }

    pub(crate) fn from_file(file: VolModelFile) -> Result<Self> {
        let k = file.scalars.n_modes;
        check_modes(k)?;
        VolModel::new(
            unsection(&file.factor, k)?,
            unsection(&file.residual, k)?,
            file.factor.scales,
            file.residual.scales,
            file.scalars.zeta0,
            file.scalars.kappa0,
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("volatility model serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: VolModelFile = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        Self::from_file(file)
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

/// Writes an omega series as date-indexed CSV.
pub fn write_omega(path: &Path, dates: &[String], omega: &OmegaSeries, precision: Option<usize>) -> Result<()> {
    let k = if omega.omega1.is_some() { 2 } else { 1 };
    let mut m = DMatrix::zeros(omega.omega0.len(), k);
    m.column_mut(0).copy_from_slice(&omega.omega0);
    let mut header = vec!["omega0".to_string()];
    if let Some(o1) = &omega.omega1 {
        m.column_mut(1).copy_from_slice(o1);
        header.push("omega1".into());
    }
    crate::data::write_dated_matrix(path, dates, &header, &m, precision)
}
