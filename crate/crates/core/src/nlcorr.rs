//! Log-abs ("generalized non-linear") correlations among factors and residuals:
//!
//! `C_xy(p) = p^-2 ln( <|x y|^p> / (<|x|^p> <|y|^p>) )`
//!
//! computed for every pair of series on a grid of orders `p` in (0, 2].

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::write_file;
use crate::error::{Error, Result};
use crate::io::{read_labeled_matrix, write_labeled_matrix};
use crate::linalg::{self, SortedEigen, SortedSvd};
use crate::linfactor::FactorSeries;

/// Absolute values below this are clamped before taking powers or logs.
pub const ZERO_CLAMP: f64 = 1e-12;

/// Eight equally spaced orders from 0.2 to 2.0.
pub fn default_p_grid() -> Vec<f64> {
    (0..8).map(|i| 0.2 + 1.8 * i as f64 / 7.0).collect()
}

/// The p-indexed family of factor-factor, residual-residual and
/// factor-residual log-abs correlation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinCorrSet {
    pub p_grid: Vec<f64>,
    /// M×M per p.
    pub cff: Vec<DMatrix<f64>>,
    /// N×N per p.
    pub crr: Vec<DMatrix<f64>>,
    /// M×N per p.
    pub cfr: Vec<DMatrix<f64>>,
    /// Number of series cells whose magnitude was clamped to [`ZERO_CLAMP`].
    pub clamped: usize,
}

impl NonlinCorrSet {
    pub fn n_factors(&self) -> usize {
        self.cff.first().map_or(0, |m| m.nrows())
    }

    pub fn n_assets(&self) -> usize {
        self.crr.first().map_or(0, |m| m.nrows())
    }

    /// Position of `p` in the grid (to 1e-9).
    pub fn index_of(&self, p: f64) -> Option<usize> {
        self.p_grid.iter().position(|q| (q - p).abs() < 1e-9)
    }

    fn average(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut acc = mats[0].clone();
        for m in &mats[1..] {
            acc += m;
        }
        acc / mats.len() as f64
    }

    pub fn mean_cff(&self) -> DMatrix<f64> {
        Self::average(&self.cff)
    }

    pub fn mean_crr(&self) -> DMatrix<f64> {
        Self::average(&self.crr)
    }

    pub fn mean_cfr(&self) -> DMatrix<f64> {
        Self::average(&self.cfr)
    }
}

fn check_grid(p_grid: &[f64]) -> Result<()> {
    if p_grid.is_empty() {
        return Err(Error::Domain("empty p grid".into()));
    }
    if let Some(p) = p_grid.iter().find(|p| !(**p > 0.0 && **p <= 2.0)) {
        return Err(Error::Domain(format!("order p = {p} outside (0, 2]")));
    }
    Ok(())
}

/// Log-abs correlation matrix among the columns of `x` at order `p`.
fn log_abs_matrix(abs: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let t = abs.nrows() as f64;
    let powered = abs.map(|v| v.powf(p));
    let means: Vec<f64> = powered.column_iter().map(|c| c.sum() / t).collect();
    let gram = linalg::second_moment(&powered);
    let k = gram.nrows();
    let p2 = p * p;
    let mut c = DMatrix::zeros(k, k);
    for j in 0..k {
        for i in j..k {
            let v = (gram[(i, j)] / (means[i] * means[j])).ln() / p2;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Estimates the log-abs correlations of the series for every order in `p_grid`.
pub fn estimate_nlcorr(series: &FactorSeries, p_grid: &[f64]) -> Result<NonlinCorrSet> {
    check_grid(p_grid)?;
    let t = series.factors.nrows();
    if t < 2 || series.residuals.nrows() != t {
        return Err(Error::Dimension(format!(
            "need at least 2 aligned dates, got {t} and {}",
            series.residuals.nrows()
        )));
    }
    let m = series.factors.ncols();
    let n = series.residuals.ncols();
    let mut joined = DMatrix::zeros(t, m + n);
    joined.columns_mut(0, m).copy_from(&series.factors);
    joined.columns_mut(m, n).copy_from(&series.residuals);
    if let Some(idx) = joined
        .column_iter()
        .position(|c| c.iter().all(|v| *v == 0.0))
    {
        return Err(Error::DegenerateSeries { index: idx });
    }
    let mut clamped = 0;
    let abs = joined.map(|v| {
        let a = v.abs();
        if a < ZERO_CLAMP {
            clamped += 1;
            ZERO_CLAMP
        } else {
            a
        }
    });
    if clamped > 0 {
        log::warn!("{clamped} series values clamped to {ZERO_CLAMP} in log-abs correlations");
    }
    let blocks: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = p_grid
        .par_iter()
        .map(|&p| {
            let c = log_abs_matrix(&abs, p);
            (
                c.view((0, 0), (m, m)).into_owned(),
                c.view((m, m), (n, n)).into_owned(),
                c.view((0, m), (m, n)).into_owned(),
            )
        })
        .collect();
    let mut set = NonlinCorrSet {
        p_grid: p_grid.to_vec(),
        cff: Vec::with_capacity(p_grid.len()),
        crr: Vec::with_capacity(p_grid.len()),
        cfr: Vec::with_capacity(p_grid.len()),
        clamped,
    };
    for (ff, rr, fr) in blocks {
        set.cff.push(ff);
        set.crr.push(rr);
        set.cfr.push(fr);
    }
    Ok(set)
}

/// Spectral content of one (possibly p-averaged) triple of matrices.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    /// `None` when the matrices were averaged over the grid.
    pub p: Option<f64>,
    pub ff: SortedEigen,
    pub rr: SortedEigen,
    pub fr: SortedSvd,
}

/// Eigen-decompositions of `cff`, `crr` and singular triplets of `cfr`,
/// either for each order or for the grid average.
pub fn spectral_summary(set: &NonlinCorrSet, p_average: bool) -> Vec<SpectralSummary> {
    if p_average {
        vec![SpectralSummary {
            p: None,
            ff: linalg::sym_eigen(&set.mean_cff()),
            rr: linalg::sym_eigen(&set.mean_crr()),
            fr: linalg::svd(&set.mean_cfr()),
        }]
    } else {
        set.p_grid
            .iter()
            .enumerate()
            .map(|(i, &p)| SpectralSummary {
                p: Some(p),
                ff: linalg::sym_eigen(&set.cff[i]),
                rr: linalg::sym_eigen(&set.crr[i]),
                fr: linalg::svd(&set.cfr[i]),
            })
            .collect()
    }
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{}", i + 1)).collect()
}

/// Writes one CSV per (matrix, p) under `dir` plus `index.csv`.
/// Returns the path of the index file.
pub fn write_nlcorr(
    set: &NonlinCorrSet,
    dir: &Path,
    precision: Option<usize>,
) -> Result<std::path::PathBuf> {
    let m = set.n_factors();
    let n = set.n_assets();
    let f = labels("f", m);
    let r = labels("r", n);
    let mut index = String::from("matrix,p_index,p,file\n");
    for (i, &p) in set.p_grid.iter().enumerate() {
        for (name, mat, rows, cols) in [
            ("ff", &set.cff[i], &f, &f),
            ("rr", &set.crr[i], &r, &r),
            ("fr", &set.cfr[i], &f, &r),
        ] {
            let file = format!("{name}_{i:02}.csv");
            write_labeled_matrix(&dir.join(&file), name, rows, cols, mat, precision)?;
            index.push_str(&format!("{name},{i},{p},{file}\n"));
        }
    }
    let path = dir.join("index.csv");
    write_file(&path, index.as_bytes())?;
    Ok(path)
}

/// Reads a set written by [`write_nlcorr`].
pub fn read_nlcorr(dir: &Path) -> Result<NonlinCorrSet> {
    let index = dir.join("index.csv");
    if !index.exists() {
        return Err(Error::MissingArtifact(index));
    }
    let mut rdr = csv::Reader::from_path(&index)?;
    let mut set = NonlinCorrSet {
        p_grid: Vec::new(),
        cff: Vec::new(),
        crr: Vec::new(),
        cfr: Vec::new(),
        clamped: 0,
    };
    for rec in rdr.records() {
        let rec = rec?;
        let p: f64 = rec[2]
            .parse()
            .map_err(|_| Error::parse(index.display().to_string(), "bad p value"))?;
        let mat = read_labeled_matrix(&dir.join(&rec[3]))?.values;
        match &rec[0] {
            "ff" => {
                set.p_grid.push(p);
                set.cff.push(mat);
            }
            "rr" => set.crr.push(mat),
            "fr" => set.cfr.push(mat),
            other => {
                return Err(Error::parse(
                    index.display().to_string(),
                    format!("unknown matrix `{other}`"),
                ))
            }
        }
    }
    if set.cff.len() != set.crr.len() || set.cff.len() != set.cfr.len() || set.cff.is_empty() {
        return Err(Error::parse(index.display().to_string(), "incomplete set"));
    }
    Ok(set)
}
