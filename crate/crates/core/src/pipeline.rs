//! The four pipeline commands behind the `nestfac` binary.
//!
//! Layout of the output directory:
//!
//! * `calibrate` writes the model artifacts at the top level
//!   (`weights.csv`, `factors.csv`, `residuals.csv`, `nlcorr/`,
//!   `vol_model.toml`, `omega.csv`) and `manifest.toml`;
//! * `simulate`, `diagnose` and `backtest` write into subdirectories of the
//!   same name, each with its own `manifest.toml`.
//!
//! Manifests carry no timestamps, so reruns with the same configuration are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::backtest::{over_perf, relative_gain, rmt_benchmark, run_backtest, write_reports, BacktestReport, CleaningScheme, Track};
use crate::config::{RunConfig, Stage};
use crate::data::{fmt_value, load_panel, load_sectors, standardize, write_dated_matrix, write_file, write_wide, ReturnPanel};
use crate::diagnostics::{
    bin_edges, binned_diagonals, copula_diagnostics, log_ratio_curve, quadratic_corr_model, quadratic_corr_sample,
    write_curve_csv, write_diagonals_csv, write_pairs_csv, Bin, BinnedDiagonals,
};
use crate::error::{Error, Result};
use crate::io::{read_weights, write_weights};
use crate::linfactor::{calibrate_weights, extract_series, sample_correlation, LinearFactorModel};
use crate::nlcorr::write_nlcorr;
use crate::simengine::{beta_shape_moments, Generator, GeneratorSpec, OmegaLaw};
use crate::svg::{Plot, Style};
use crate::volcal::{calibrate_nested, reconstruct_omega, VolModel};

pub const WEIGHTS_FILE: &str = "weights.csv";
pub const VOL_MODEL_FILE: &str = "vol_model.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Files written by one command, relative to its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    input: String,
    summary: BTreeMap<String, toml::Value>,
    artifacts: Vec<String>,
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, summary: BTreeMap<String, toml::Value>, files: &[String]) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.run.seed,
        input: cfg.input.panel.display().to_string(),
        summary,
        artifacts: files.to_vec(),
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Toml(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Loads the configured panel with its optional sector sidecar.
pub fn load_input(cfg: &RunConfig) -> Result<ReturnPanel> {
    let panel = load_panel(&cfg.input.panel, cfg.input.format, cfg.load_options())?;
    if cfg.input.sectors.as_os_str().is_empty() {
        Ok(panel)
    } else {
        Ok(panel.with_sectors(&load_sectors(&cfg.input.sectors)?))
    }
}

/// Reads the calibrated linear and volatility models from `dir`.
pub fn load_artifacts(dir: &Path) -> Result<(LinearFactorModel, Vec<String>, VolModel)> {
    let (linear, ids) = read_weights(&dir.join(WEIGHTS_FILE))?;
    let vol = VolModel::load(&dir.join(VOL_MODEL_FILE))?;
    if vol.n_factors() != linear.n_factors() || vol.n_assets() != linear.n_assets() {
        return Err(Error::Dimension(format!(
            "{} holds a {}x{} volatility model for {}x{} weights",
            dir.display(),
            vol.n_factors(),
            vol.n_assets(),
            linear.n_factors(),
            linear.n_assets()
        )));
    }
    Ok((linear, ids, vol))
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn num(v: f64) -> toml::Value {
    toml::Value::Float(v)
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

/// Standardizes the panel, fits weights, extracts the series, fits the
/// volatility model and reconstructs the volatility drivers.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate(Stage::Calibrate)?;
    let raw = load_input(cfg)?;
    let panel = standardize(&raw)?;
    let prec = cfg.output.precision();
    let dir = cfg.output.dir.clone();

    let (linear, lin_report) = calibrate_weights(&panel, cfg.linear.n_factors, &cfg.linear.calibration())?;
    if !lin_report.converged {
        log::warn!("weight calibration stopped after {} iterations", lin_report.iterations);
    }
    let series = extract_series(&panel, &linear)?;
    let fit = calibrate_nested(&series, &cfg.vol.options())?;
    let omega = reconstruct_omega(&series, &fit.vol, cfg.vol.omega_weighting)?;
    let m = linear.n_factors();

    write_weights(&dir.join(WEIGHTS_FILE), &linear, panel.asset_ids(), prec)?;
    write_dated_matrix(&dir.join("factors.csv"), panel.dates(), &labels("f", m), &series.factors, prec)?;
    write_dated_matrix(&dir.join("residuals.csv"), panel.dates(), panel.asset_ids(), &series.residuals, prec)?;
    write_nlcorr(&fit.nlcorr, &dir.join("nlcorr"), prec)?;
    fit.vol.save(&dir.join(VOL_MODEL_FILE))?;

    let mut columns: Vec<(&str, &Vec<f64>)> = vec![("factor_omega0", &omega.factor.omega0)];
    if let Some(o) = &omega.factor.omega1 {
        columns.push(("factor_omega1", o));
    }
    columns.push(("residual_omega0", &omega.residual.omega0));
    if let Some(o) = &omega.residual.omega1 {
        columns.push(("residual_omega1", o));
    }
    let header: Vec<String> = columns.iter().map(|c| c.0.to_string()).collect();
    let values = DMatrix::from_fn(panel.n_dates(), columns.len(), |t, c| columns[c].1[t]);
    write_dated_matrix(&dir.join("omega.csv"), panel.dates(), &header, &values, prec)?;

    let mut files: Vec<String> = [WEIGHTS_FILE, "factors.csv", "residuals.csv", "nlcorr/index.csv", VOL_MODEL_FILE, "omega.csv"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if cfg.output.plots {
        let mut p = Plot::new("Reconstructed volatility driver", "date index", "omega0");
        for (label, series) in [("factor", &omega.factor.omega0), ("residual", &omega.residual.omega0)] {
            p.add(label, series.iter().enumerate().map(|(t, &v)| (t as f64, v)).collect(), Style::Line);
        }
        p.save(&dir.join("omega.svg"))?;
        files.push("omega.svg".into());
    }

    let mut summary = BTreeMap::new();
    summary.insert("n_dates".into(), int(panel.n_dates()));
    summary.insert("n_assets".into(), int(panel.n_assets()));
    summary.insert("n_factors".into(), int(m));
    summary.insert("n_modes".into(), int(fit.vol.n_modes()));
    summary.insert("p_star".into(), num(cfg.vol.p_star));
    summary.insert("weights_loss".into(), num(lin_report.loss));
    summary.insert("weights_converged".into(), toml::Value::Boolean(lin_report.converged));
    summary.insert("factor_vol_loss".into(), num(fit.factor_report.loss));
    summary.insert("factor_vol_converged".into(), toml::Value::Boolean(fit.factor_report.converged));
    summary.insert("residual_vol_loss".into(), num(fit.residual_report.loss));
    summary.insert("residual_vol_converged".into(), toml::Value::Boolean(fit.residual_report.converged));
    summary.insert("zeta0".into(), num(fit.vol.zeta0));
    summary.insert("kappa0".into(), num(fit.vol.kappa0));
    summary.insert("clamped_cells".into(), int(fit.nlcorr.clamped));
    write_manifest(&dir, "calibrate", cfg, summary, &files)?;
    Ok(Outcome { dir, files })
}

/// The generator of a run: the configured generator file, or the
/// calibrated artifacts. Length, seed and infeasible-moment policy always
/// come from the configuration.
pub fn generator_spec(cfg: &RunConfig, t_sim: usize) -> Result<(GeneratorSpec, Option<Vec<String>>)> {
    let (linear, vol, ids) = if cfg.simulate.generator.as_os_str().is_empty() {
        let (linear, ids, vol) = load_artifacts(&cfg.artifact_dir())?;
        (linear, vol, Some(ids))
    } else {
        let spec = GeneratorSpec::load(&cfg.simulate.generator)?;
        (spec.linear, spec.vol, None)
    };
    let mut spec = GeneratorSpec::new(linear, vol, t_sim, cfg.run.seed)?;
    spec.policy = cfg.simulate.infeasible;
    Ok((spec, ids))
}

fn sample_moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m = |k: i32| x.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    let var = m(2);
    (mean, var, m(3) / var.powf(1.5), m(4) / (var * var) - 3.0)
}

/// Simulates a panel and reports its sample moments against the model.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate(Stage::Simulate)?;
    let (spec, ids) = generator_spec(cfg, cfg.simulate.t_sim)?;
    let generator = Generator::new(&spec)?;
    let simulated = generator.simulate()?;
    let panel = match ids {
        Some(ids) => ReturnPanel::new(simulated.returns().clone(), simulated.dates().to_vec(), ids, None)?,
        None => simulated,
    };
    let prec = cfg.output.precision();
    let dir = cfg.output.dir.join("simulate");
    write_wide(&panel, &dir.join("panel.csv"), prec)?;
    spec.save(&dir.join("generator.toml"))?;

    let law = generator.law();
    let (target_skew, target_kurt) = match law {
        OmegaLaw::Beta(p) => beta_shape_moments(p.alpha, p.beta),
        OmegaLaw::Gaussian { .. } => (0.0, 0.0),
    };
    let omega = generator.omega0_sample(spec.t_sim);
    let (om, ov, os, ok) = sample_moments(&omega);
    let r = panel.returns();
    let n = r.ncols();
    let mut rows: Vec<(&str, f64, f64)> = vec![
        ("omega0_mean", 0.0, om),
        ("omega0_variance", 1.0, ov),
        ("omega0_skewness", target_skew, os),
        ("omega0_excess_kurtosis", target_kurt, ok),
    ];
    let col_moment = |k: i32| (0..n).map(|j| r.column(j).iter().map(|v| v.powi(k)).sum::<f64>() / r.nrows() as f64).sum::<f64>() / n as f64;
    rows.push(("return_variance_mean", 1.0, col_moment(2)));
    if spec.vol.n_modes() == 1 {
        let target = (0..n)
            .map(|i| quadratic_corr_model(&spec.linear, &spec.vol, i, i))
            .sum::<Result<f64>>()?
            / n as f64;
        rows.push(("return_fourth_moment_mean", target, col_moment(4)));
    }
    let model_corr = spec.linear.model_correlation();
    let sample_corr = sample_correlation(r);
    let pairs = (n * (n - 1) / 2) as f64;
    let off = |c: &DMatrix<f64>| (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]).sum::<f64>() / pairs;
    rows.push(("correlation_mean", off(&model_corr), off(&sample_corr)));
    let mut report = String::from("quantity,model,sample\n");
    for (q, t, s) in &rows {
        report.push_str(&format!("{q},{},{}\n", fmt_value(*t, prec), fmt_value(*s, prec)));
    }
    write_file(&dir.join("moments.csv"), report.as_bytes())?;

    let files: Vec<String> = ["panel.csv", "generator.toml", "moments.csv"].iter().map(|s| s.to_string()).collect();
    let mut summary = BTreeMap::new();
    summary.insert("t_sim".into(), int(spec.t_sim));
    summary.insert("n_assets".into(), int(n));
    summary.insert("omega_law".into(), toml::Value::String(law_name(&law).into()));
    write_manifest(&dir, "simulate", cfg, summary, &files)?;
    Ok(Outcome { dir, files })
}

fn law_name(law: &OmegaLaw) -> &'static str {
    match law {
        OmegaLaw::Beta(_) => "beta",
        OmegaLaw::Gaussian { fallback: false } => "gaussian",
        OmegaLaw::Gaussian { fallback: true } => "gaussian-fallback",
    }
}

fn curve_points(bins: &[Bin]) -> Vec<(f64, f64)> {
    bins.iter().map(|b| (b.mean_rho, b.mean)).collect()
}

/// Empirical and model-implied copula and quadratic-correlation diagnostics.
/// Model curves come from a panel simulated with the calibrated model.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate(Stage::Diagnose)?;
    let (linear, _, vol) = load_artifacts(&cfg.artifact_dir())?;
    let panel = standardize(&load_input(cfg)?)?;
    if panel.n_assets() != linear.n_assets() {
        return Err(Error::Dimension(format!(
            "panel has {} assets, calibrated model {}",
            panel.n_assets(),
            linear.n_assets()
        )));
    }
    let prec = cfg.output.precision();
    let dir = cfg.output.dir.join("diagnose");
    let grid = cfg.diagnose.grid();
    let edges = bin_edges(-1.0, 1.0, cfg.diagnose.bin_width);

    let empirical = copula_diagnostics(panel.returns(), &grid)?;
    let emp_curve = log_ratio_curve(&empirical, &edges);
    let emp_diag = binned_diagonals(&empirical, &edges);

    let mut spec = GeneratorSpec::new(linear.clone(), vol.clone(), cfg.diagnose.n_sim, cfg.run.seed)?;
    spec.policy = cfg.simulate.infeasible;
    let generator = Generator::new(&spec)?;
    let simulated = generator.simulate_matrix();
    let model = copula_diagnostics(&simulated, &grid)?;
    let model_curve = log_ratio_curve(&model, &edges);
    let model_diag = binned_diagonals(&model, &edges);

    write_pairs_csv(&dir.join("pairs.csv"), &empirical, panel.asset_ids(), prec)?;
    write_curve_csv(&dir.join("empirical_curve.csv"), &emp_curve, prec)?;
    write_curve_csv(&dir.join("model_curve.csv"), &model_curve, prec)?;
    write_diagonals_csv(&dir.join("empirical_diagonals.csv"), &grid, &emp_diag, prec)?;
    write_diagonals_csv(&dir.join("model_diagonals.csv"), &grid, &model_diag, prec)?;

    let sample_q = quadratic_corr_sample(panel.returns());
    let (model_q, source) = if vol.n_modes() == 1 {
        let n = linear.n_assets();
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                q[(i, j)] = quadratic_corr_model(&linear, &vol, i, j)?;
            }
        }
        (q, "analytic")
    } else {
        (quadratic_corr_sample(&simulated), "simulated")
    };
    let ids = panel.asset_ids();
    let mut quad = String::from("asset_i,asset_j,rho,sample,model\n");
    let mut scatter = Vec::with_capacity(empirical.pairs.len());
    for (k, &(i, j)) in empirical.pairs.iter().enumerate() {
        quad.push_str(&format!(
            "{},{},{},{},{}\n",
            ids[i],
            ids[j],
            fmt_value(empirical.rho_lin[k], prec),
            fmt_value(sample_q[(i, j)], prec),
            fmt_value(model_q[(i, j)], prec)
        ));
        scatter.push((model_q[(i, j)], sample_q[(i, j)]));
    }
    write_file(&dir.join("quadratic.csv"), quad.as_bytes())?;

    let mut files: Vec<String> = [
        "pairs.csv",
        "empirical_curve.csv",
        "model_curve.csv",
        "empirical_diagonals.csv",
        "model_diagonals.csv",
        "quadratic.csv",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    if cfg.output.plots {
        let mut p = Plot::new("Log-ratio of linear to medial correlation", "rho", "ln|rho / rho_B|");
        p.add("empirical", curve_points(&emp_curve), Style::Line)
            .add("model", curve_points(&model_curve), Style::Dashed)
            .add("elliptical", vec![(-1.0, 0.0), (1.0, 0.0)], Style::Dashed);
        p.save(&dir.join("log_ratio.svg"))?;

        if let Some(bin) = emp_diag.iter().max_by_key(|b| b.count) {
            let matching = model_diag.iter().find(|b| b.lower == bin.lower);
            let mut p = Plot::new(
                &format!("Copula diagonals, rho in [{:.2}, {:.2})", bin.lower, bin.upper),
                "p",
                "departure from Gaussian copula",
            );
            let pts = |b: &BinnedDiagonals, anti: bool| -> Vec<(f64, f64)> {
                let v = if anti { &b.antidiag } else { &b.diag };
                grid.iter().copied().zip(v.iter().copied()).collect()
            };
            p.add("empirical diagonal", pts(bin, false), Style::Line)
                .add("empirical anti-diagonal", pts(bin, true), Style::Line);
            if let Some(mb) = matching {
                p.add("model diagonal", pts(mb, false), Style::Dashed)
                    .add("model anti-diagonal", pts(mb, true), Style::Dashed);
            }
            p.save(&dir.join("diagonals.svg"))?;
        }

        let lo = scatter.iter().map(|p| p.0.min(p.1)).fold(f64::INFINITY, f64::min);
        let hi = scatter.iter().map(|p| p.0.max(p.1)).fold(f64::NEG_INFINITY, f64::max);
        let mut p = Plot::new("Quadratic correlations", "model E[r_i^2 r_j^2]", "sample E[r_i^2 r_j^2]");
        p.add("pairs", scatter, Style::Points);
        if lo.is_finite() {
            p.add("identity", vec![(lo, lo), (hi, hi)], Style::Dashed);
        }
        p.save(&dir.join("quadratic.svg"))?;
        files.extend(["log_ratio.svg", "diagonals.svg", "quadratic.svg"].iter().map(|s| s.to_string()));
    }

    let mut summary = BTreeMap::new();
    summary.insert("n_pairs".into(), int(empirical.pairs.len()));
    summary.insert("n_sim".into(), int(cfg.diagnose.n_sim));
    summary.insert("grid_points".into(), int(grid.len()));
    summary.insert("quadratic_model".into(), toml::Value::String(source.into()));
    summary.insert("omega_law".into(), toml::Value::String(law_name(&generator.law()).into()));
    write_manifest(&dir, "diagnose", cfg, summary, &files)?;
    Ok(Outcome { dir, files })
}

/// Per-`M` comparison of the factor schemes: relative gain of clipping over
/// the multi-factor fit on the linear track, over-performance of the nested
/// model over the Gaussian one on the absolute track.
pub fn scheme_comparisons(reports: &[BacktestReport], track: Track) -> Vec<(usize, &'static str, f64)> {
    let find = |pred: &dyn Fn(&CleaningScheme) -> bool| reports.iter().find(|r| pred(&r.scheme)).map(|r| r.mean_os);
    let mut out = Vec::new();
    for r in reports {
        match (track, r.scheme) {
            (Track::Linear, CleaningScheme::Clipped { m }) => {
                if let Some(mf) = find(&|s| *s == CleaningScheme::MultiFactorLinear { m }) {
                    if let Ok(g) = relative_gain(r.mean_os, mf) {
                        out.push((m, "relative_gain", g));
                    }
                }
            }
            (Track::Absolute, CleaningScheme::GaussianFactor { m }) => {
                if let Some(nf) = find(&|s| matches!(s, CleaningScheme::NestedFactor { m: mm, .. } if *mm == m)) {
                    if let Ok(g) = over_perf(nf, r.mean_os) {
                        out.push((m, "over_perf", g));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Sliding-window in-sample/out-of-sample risk backtest.
pub fn cmd_backtest(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate(Stage::Backtest)?;
    let panel = load_input(cfg)?;
    let n = panel.n_assets();
    let schemes = cfg.backtest.schemes(n)?;
    let opts = cfg.backtest_options();
    let t_is = opts.t_is.unwrap_or(2 * n);
    let reports = run_backtest(&panel, &schemes, cfg.backtest.track, &opts)?;
    let prec = cfg.output.precision();
    let dir = cfg.output.dir.join("backtest");
    write_reports(&dir, &reports, n, t_is, prec, cfg.output.plots)?;

    let mut cmp = String::from("m,metric,value\n");
    for (m, metric, v) in scheme_comparisons(&reports, cfg.backtest.track) {
        cmp.push_str(&format!("{m},{metric},{}\n", fmt_value(v, prec)));
    }
    write_file(&dir.join("comparisons.csv"), cmp.as_bytes())?;

    let mut files: Vec<String> = ["summary.csv", "windows.csv", "curves.csv", "comparisons.csv"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if cfg.output.plots {
        files.push("curves.svg".into());
    }
    let mut summary = BTreeMap::new();
    summary.insert("n_assets".into(), int(n));
    summary.insert("t_is".into(), int(t_is));
    summary.insert("t_os".into(), int(opts.t_os));
    summary.insert("n_windows".into(), int(reports.first().map_or(0, |r| r.windows.len())));
    summary.insert("n_schemes".into(), int(reports.len()));
    if let Ok((is, os)) = rmt_benchmark(n as f64 / t_is as f64) {
        summary.insert("noise_is".into(), num(is));
        summary.insert("noise_os".into(), num(os));
    }
    write_manifest(&dir, "backtest", cfg, summary, &files)?;
    Ok(Outcome { dir, files })
}
