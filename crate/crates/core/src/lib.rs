//! Nested factor model for stock returns.
//!
//! Linear factors capture the linear correlations; the log-volatilities of
//! the factors and of the residuals carry their own factor structure, driven
//! by one or two common modes. The crate calibrates the model on a panel of
//! returns, simulates it, computes copula and quadratic-correlation
//! diagnostics, and backtests correlation-cleaning schemes out of sample.

pub mod backtest;
pub mod bvn;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod linfactor;
pub mod nlcorr;
pub mod optim;
pub mod pipeline;
pub mod simengine;
pub mod svg;
pub mod volcal;

pub use error::{Error, Result};
