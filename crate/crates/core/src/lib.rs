//! Time discretization of decoupled forward-backward SDEs with quadratic
//! drivers and bounded, possibly singular, drift.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: partitions, reproducible noise, coupled refinement.
//! * [`forward`]: drift corpus, Euler-Maruyama, strong and quadrature errors.
//! * [`zvonkin`]: the damped backward Kolmogorov PDE and the drift transform.
//! * [`driver`]: quadratic drivers, truncation, terminal functionals.
//! * [`condexp`]: conditional-expectation backends.
//! * [`btz`]: the backward scheme, its checks and the Malliavin estimator of Z.
//! * [`oracle`]: closed-form references.
//! * [`harness`]: configs, rate fits and convergence studies.

pub mod btz;
pub mod condexp;
pub mod error;
pub mod forward;
pub mod driver;
pub mod grid;
pub mod harness;
pub mod oracle;
pub mod quadrature;
pub mod stats;
pub mod zvonkin;

pub use error::{Error, Result};
