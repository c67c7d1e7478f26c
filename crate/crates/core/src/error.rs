//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised while loading data, calibrating, simulating or backtesting.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input row or field.
    #[error("parse error at {location}: {message}")]
    Parse {
        /// File and line (or other locator) of the offending input.
        location: String,
        /// What went wrong.
        message: String,
    },

    /// An asset misses more dates than allowed.
    #[error("asset {asset} misses {missing} of {total} dates (allowed fraction {allowed})")]
    Coverage {
        asset: String,
        missing: usize,
        total: usize,
        allowed: f64,
    },

    /// The same (date, asset) cell appears twice.
    #[error("duplicate cell for date {date}, asset {asset}")]
    Duplicate { date: String, asset: String },

    /// A column has zero variance.
    #[error("column {column} is degenerate (zero variance)")]
    DegenerateColumn { column: usize },

    /// Requested rank exceeds what the data supports.
    #[error("rank error: {0}")]
    Rank(String),

    /// Optimizer exhausted its iteration budget.
    #[error("optimizer did not converge after {iterations} iterations (loss {loss:e})")]
    Convergence { iterations: usize, loss: f64 },

    /// A linear system that must be inverted is singular.
    #[error("singular system: {0}")]
    Singularity(String),

    /// Argument outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A series is identically zero.
    #[error("series {index} is identically zero")]
    DegenerateSeries { index: usize },

    /// Target moments cannot be reached by the Beta family.
    #[error("moments (skewness {zeta0}, excess kurtosis {kappa0}) are outside the Beta family")]
    InfeasibleMoments { zeta0: f64, kappa0: f64 },

    /// Two series that must have equal length do not.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Inconsistent matrix or vector dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Matrix stays singular after regularization.
    #[error("singular matrix even after ridge regularization")]
    SingularMatrix,

    /// Predictor row is identically zero.
    #[error("predictor row is identically zero")]
    ZeroRow,

    /// Ratio with a vanishing denominator.
    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),

    /// A calibrated artifact needed by a command is absent.
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml error: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by bad input or configuration rather than numerics.
    pub fn is_config_or_io(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Coverage { .. }
                | Error::Duplicate { .. }
                | Error::Config(_)
                | Error::MissingArtifact(_)
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Toml(_)
                | Error::LengthMismatch { .. }
                | Error::Dimension(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
