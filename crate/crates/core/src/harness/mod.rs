//! Convergence studies: configuration, rate fits, sweeps and reports.

pub mod config;
pub mod rate;
pub mod study;

pub use config::{Config, ReferencePolicy, Scheme};
pub use rate::{fit_rate, RateFit};
pub use study::{btz_error, btz_point, run_study, BtzError, BtzSetup, ConvergenceReport, Reference};
