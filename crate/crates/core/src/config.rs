//! Run configuration for the command-line pipeline.
//!
//! Every field has a default, so an empty file (or no file) is a valid
//! configuration. `RunConfig::default().to_toml()` is the annotated
//! reference printed by `--print-config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::{default_schemes, BacktestOptions, CleaningScheme, Track};
use crate::data::{LoadOptions, PanelFormat};
use crate::error::{Error, Result};
use crate::linfactor::WeightCalibration;
use crate::nlcorr::default_p_grid;
use crate::optim::LbfgsOptions;
use crate::simengine::InfeasiblePolicy;
use crate::volcal::{MgfClosure, NestedVolOptions, OmegaWeighting, ResidualFit, VolCalibration};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub output: OutputConfig,
    pub run: RunSection,
    pub linear: LinearConfig,
    pub vol: VolConfig,
    pub simulate: SimulateConfig,
    pub diagnose: DiagnoseConfig,
    pub backtest: BacktestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Return panel; empty means unset.
    pub panel: PathBuf,
    pub format: PanelFormat,
    /// Optional `asset,sector_code` sidecar; empty means none.
    pub sectors: PathBuf,
    pub max_missing_fraction: f64,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            panel: PathBuf::new(),
            format: PanelFormat::Wide,
            sectors: PathBuf::new(),
            max_missing_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Significant digits after the point in scientific notation; 0 writes
    /// the shortest representation that round-trips.
    pub precision: usize,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            precision: 0,
            plots: true,
        }
    }
}

impl OutputConfig {
    pub fn precision(&self) -> Option<usize> {
        (self.precision > 0).then_some(self.precision)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed of every random draw.
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    pub n_factors: usize,
    pub barrier: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        let w = WeightCalibration::default();
        LinearConfig {
            n_factors: 10,
            barrier: w.barrier,
            max_iter: w.lbfgs.max_iter,
            rel_tol: w.lbfgs.rel_tol,
        }
    }
}

impl LinearConfig {
    pub fn calibration(&self) -> WeightCalibration {
        WeightCalibration {
            lbfgs: LbfgsOptions {
                max_iter: self.max_iter,
                rel_tol: self.rel_tol,
                ..LbfgsOptions::default()
            },
            barrier: self.barrier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolConfig {
    pub n_modes: usize,
    pub p_grid: Vec<f64>,
    pub p_star: f64,
    pub residual_fit: ResidualFit,
    pub omega_weighting: OmegaWeighting,
    /// Mode-overlap penalty for two modes; 0 uses the mean squared
    /// off-diagonal factor-factor correlation.
    pub overlap_weight: f64,
    pub closure: MgfClosure,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for VolConfig {
    fn default() -> Self {
        let l = LbfgsOptions::default();
        VolConfig {
            n_modes: 1,
            p_grid: default_p_grid(),
            p_star: 1.0,
            residual_fit: ResidualFit::Joint,
            omega_weighting: OmegaWeighting::Ordinary,
            overlap_weight: 0.0,
            closure: MgfClosure::Cumulant,
            max_iter: l.max_iter,
            rel_tol: l.rel_tol,
        }
    }
}

impl VolConfig {
    pub fn options(&self) -> NestedVolOptions {
        NestedVolOptions {
            n_modes: self.n_modes,
            p_grid: self.p_grid.clone(),
            p_star: self.p_star,
            residual_fit: self.residual_fit,
            calibration: VolCalibration {
                lbfgs: LbfgsOptions {
                    max_iter: self.max_iter,
                    rel_tol: self.rel_tol,
                    ..LbfgsOptions::default()
                },
                overlap_weight: (self.overlap_weight > 0.0).then_some(self.overlap_weight),
                closure: self.closure,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Generator file; empty builds the generator from the calibrated
    /// artifacts in the output directory.
    pub generator: PathBuf,
    pub t_sim: usize,
    pub infeasible: InfeasiblePolicy,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            generator: PathBuf::new(),
            t_sim: 10_000,
            infeasible: InfeasiblePolicy::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Directory holding `weights.csv` and `vol_model.toml`; empty means the
    /// output directory.
    pub artifacts: PathBuf,
    /// Points of the copula-diagonal grid on [0.01, 0.99].
    pub grid_points: usize,
    /// Width of the correlation bins on [-1, 1].
    pub bin_width: f64,
    /// Simulated dates for the model-implied curves.
    pub n_sim: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            artifacts: PathBuf::new(),
            grid_points: 101,
            bin_width: 0.05,
            n_sim: 20_000,
        }
    }
}

impl DiagnoseConfig {
    pub fn grid(&self) -> Vec<f64> {
        if self.grid_points == 1 {
            return vec![0.5];
        }
        let step = 0.98 / (self.grid_points - 1) as f64;
        (0..self.grid_points).map(|i| 0.01 + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub track: Track,
    /// In-sample window; 0 means twice the number of assets.
    pub t_is: usize,
    pub t_os: usize,
    /// Scheme specs such as `clipped:10`; empty runs the default grids.
    pub schemes: Vec<String>,
    pub n_sim: usize,
    pub warm_start: bool,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            track: Track::Linear,
            t_is: 0,
            t_os: 59,
            schemes: Vec::new(),
            n_sim: 100_000,
            warm_start: false,
        }
    }
}

impl BacktestConfig {
    pub fn schemes(&self, n: usize) -> Result<Vec<CleaningScheme>> {
        if self.schemes.is_empty() {
            return Ok(default_schemes(self.track, n));
        }
        self.schemes.iter().map(|s| s.parse()).collect()
    }
}

/// The pipeline stage a configuration is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Calibrate,
    Simulate,
    Diagnose,
    Backtest,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always serializable")
    }

    /// Reads a config file; a missing file is an i/o error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Toml(m) => Error::Toml(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            max_missing_fraction: self.input.max_missing_fraction,
        }
    }

    /// Directory holding the calibrated artifacts read by later stages.
    pub fn artifact_dir(&self) -> PathBuf {
        if self.diagnose.artifacts.as_os_str().is_empty() {
            self.output.dir.clone()
        } else {
            self.diagnose.artifacts.clone()
        }
    }

    pub fn backtest_options(&self) -> BacktestOptions {
        BacktestOptions {
            t_is: (self.backtest.t_is > 0).then_some(self.backtest.t_is),
            t_os: self.backtest.t_os,
            seed: self.run.seed,
            weights: self.linear.calibration(),
            warm_start: self.backtest.warm_start,
            n_sim: self.backtest.n_sim,
            nested: self.vol.options(),
        }
    }

    /// Checks ranges and grids, and that the files a stage reads exist.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.input.max_missing_fraction) {
            return bad(format!(
                "input.max_missing_fraction must be in [0, 1), got {}",
                self.input.max_missing_fraction
            ));
        }
        if self.linear.n_factors == 0 {
            return bad("linear.n_factors must be positive".into());
        }
        if self.vol.n_modes != 1 && self.vol.n_modes != 2 {
            return bad(format!("vol.n_modes must be 1 or 2, got {}", self.vol.n_modes));
        }
        if self.vol.p_grid.is_empty() {
            return bad("vol.p_grid is empty".into());
        }
        if self.vol.p_grid.iter().chain([&self.vol.p_star]).any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad("vol.p_grid and vol.p_star must be positive".into());
        }
        if self.vol.overlap_weight < 0.0 {
            return bad("vol.overlap_weight must be non-negative".into());
        }
        if self.simulate.t_sim == 0 {
            return bad("simulate.t_sim must be positive".into());
        }
        if self.diagnose.grid_points == 0 {
            return bad("diagnose.grid_points must be positive".into());
        }
        if !(self.diagnose.bin_width > 0.0 && self.diagnose.bin_width <= 2.0) {
            return bad(format!("diagnose.bin_width must be in (0, 2], got {}", self.diagnose.bin_width));
        }
        if self.backtest.t_os == 0 {
            return bad("backtest.t_os must be positive".into());
        }
        for s in &self.backtest.schemes {
            s.parse::<CleaningScheme>()?;
        }
        let needs_panel = stage != Stage::Simulate;
        if needs_panel {
            if self.input.panel.as_os_str().is_empty() {
                return bad("input.panel is not set".into());
            }
            require(&self.input.panel)?;
        }
        if !self.input.sectors.as_os_str().is_empty() {
            require(&self.input.sectors)?;
        }
        if stage == Stage::Simulate && !self.simulate.generator.as_os_str().is_empty() {
            require(&self.simulate.generator)?;
        }
        Ok(())
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}
