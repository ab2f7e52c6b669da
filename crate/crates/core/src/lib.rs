//! Comparison of multivariate distributions with spatial-quantile Q-Q
//! plots and related hypothesis tests.
//!
//! The crate is organized around the spatial quantile: [`spatial`] computes
//! ranks and empirical quantiles, [`distributions`] supplies samplers,
//! densities and model quantiles, [`qqplot`] assembles the diagnostic point
//! sets, [`gof`] implements the integrated-discrepancy tests with simulated
//! Gaussian-process nulls, [`baselines`] provides multivariate KS, CVM and
//! MST-run comparisons, and [`powerlab`] runs level/power experiments and
//! contiguous-alternative asymptotics.

pub mod baselines;
pub mod distributions;
pub mod gof;
pub mod numerics;
pub mod powerlab;
pub mod qqplot;
pub mod spatial;

pub use numerics::{DataMatrix, RngStream};
pub use spatial::{QuantileIndex, SolverConfig};
