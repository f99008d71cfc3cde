//! Closed-form references for the backward equation with `b ≡ 0`, `d = 1`
//! and a terminal-only condition `ξ = Φ(X_T)`.
//!
//! * zero driver: `Y(t,x) = E[Φ(x + √τ G)]`
//! * linear driver `a y + c z`: `Y(t,x) = e^{aτ} E[Φ(x + cτ + √τ G)]`
//! * `(γ/2)|z|²`: `Y(t,x) = (1/γ) ln E[exp(γ Φ(x + √τ G))]`
//!
//! with `τ = T - t`. `Z = ∂_x Y` is obtained from the Gaussian integration
//! by parts `∂_x E[f(x + √τ G)] = E[f(x + √τ G) G] / √τ`.

use serde::Serialize;

use crate::driver::{DriverKind, DriverSpec, TerminalFunctional};
use crate::error::{Error, Result};
use crate::forward::DriftSpec;
use crate::quadrature::{expect_normal, expect_normal_gh};

/// `ln E[exp(clamp(G, ±1))]`, `G` standard normal, from 30-digit adaptive
/// quadrature.
pub const COLE_HOPF_CLAMP_Y0: f64 = 0.244_112_328_826_188_836;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    ZeroDriver,
    Linear { a: f64, c: f64 },
    ColeHopf { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum QuadratureMethod {
    /// Gauss-Legendre panels on [-12, 12] split at the kinks of the integrand.
    Composite { panels: usize, order: usize },
    GaussHermite { order: usize },
}

impl Default for QuadratureMethod {
    fn default() -> Self {
        QuadratureMethod::Composite { panels: 8, order: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub kind: OracleKind,
    pub method: QuadratureMethod,
    pub horizon: f64,
    pub x0: f64,
    pub y0: f64,
    pub z0: f64,
    terminal: TerminalFunctional,
}

impl OracleSolution {
    /// Builds the oracle matching `driver`; rejects drivers, drifts and
    /// terminals outside the closed-form cases.
    pub fn new(
        driver: &DriverSpec,
        drift: &DriftSpec,
        terminal: &TerminalFunctional,
        horizon: f64,
        x0: f64,
        method: QuadratureMethod,
    ) -> Result<Self> {
        if !matches!(drift.kind(), crate::forward::DriftKind::Zero) {
            return Err(Error::validation("closed-form oracles need zero drift"));
        }
        if !terminal.is_terminal_only() {
            return Err(Error::validation("closed-form oracles need a terminal-only functional"));
        }
        let kind = match driver.kind() {
            DriverKind::Zero => OracleKind::ZeroDriver,
            DriverKind::Linear { a, c } if c.len() == 1 => OracleKind::Linear { a: *a, c: c[0] },
            DriverKind::Quadratic { gamma } if *gamma != 0.0 => OracleKind::ColeHopf { gamma: *gamma },
            DriverKind::Quadratic { .. } => OracleKind::ZeroDriver,
            _ => return Err(Error::validation(format!("no closed-form oracle for driver '{}'", driver.name()))),
        };
        if !(horizon > 0.0) {
            return Err(Error::validation("horizon must be positive"));
        }
        let mut sol = OracleSolution { kind, method, horizon, x0, y0: 0.0, z0: 0.0, terminal: terminal.clone() };
        sol.y0 = sol.y(0.0, x0)?;
        sol.z0 = sol.z(0.0, x0)?;
        Ok(sol)
    }

    fn expect<F: Fn(f64) -> f64>(&self, f: F, shift: f64, sd: f64) -> Result<f64> {
        match self.method {
            QuadratureMethod::Composite { panels, order } => {
                let breaks: Vec<f64> = self.terminal.kinks().iter().map(|k| (k - shift) / sd).collect();
                expect_normal(f, &breaks, panels, order)
            }
            QuadratureMethod::GaussHermite { order } => expect_normal_gh(f, order),
        }
    }

    fn phi(&self, x: f64) -> f64 {
        self.terminal.point_value(x).expect("terminal-only")
    }

    /// `Y(t, x)`.
    pub fn y(&self, t: f64, x: f64) -> Result<f64> {
        let tau = self.horizon - t;
        if tau < 0.0 {
            return Err(Error::validation("time beyond the horizon"));
        }
        if tau == 0.0 {
            return Ok(self.phi(x));
        }
        let sd = tau.sqrt();
        match self.kind {
            OracleKind::ZeroDriver => self.expect(|g| self.phi(x + sd * g), x, sd),
            OracleKind::Linear { a, c } => {
                let shift = x + c * tau;
                Ok((a * tau).exp() * self.expect(|g| self.phi(shift + sd * g), shift, sd)?)
            }
            OracleKind::ColeHopf { gamma } => {
                let u = self.expect(|g| (gamma * self.phi(x + sd * g)).exp(), x, sd)?;
                Ok(u.ln() / gamma)
            }
        }
    }

    /// `Z(t, x) = ∂_x Y(t, x)` for `t < T`.
    pub fn z(&self, t: f64, x: f64) -> Result<f64> {
        let tau = self.horizon - t;
        if !(tau > 0.0) {
            return Err(Error::validation("Z is only given strictly before the horizon"));
        }
        let sd = tau.sqrt();
        match self.kind {
            OracleKind::ZeroDriver => Ok(self.expect(|g| self.phi(x + sd * g) * g, x, sd)? / sd),
            OracleKind::Linear { a, c } => {
                let shift = x + c * tau;
                Ok((a * tau).exp() * self.expect(|g| self.phi(shift + sd * g) * g, shift, sd)? / sd)
            }
            OracleKind::ColeHopf { gamma } => {
                let u = self.expect(|g| (gamma * self.phi(x + sd * g)).exp(), x, sd)?;
                let du = self.expect(|g| (gamma * self.phi(x + sd * g)).exp() * g, x, sd)? / sd;
                Ok(du / (gamma * u))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::PointKind;
    use crate::quadrature::normal_cdf;

    fn clamp1() -> TerminalFunctional {
        TerminalFunctional::terminal(PointKind::Clamp { level: 1.0 }, 1.0).unwrap()
    }

    /// `E[exp(clamp(x + sG, ±1))]` in closed form.
    fn clamp_exp_moment(x: f64, s: f64) -> f64 {
        let e = std::f64::consts::E;
        (-1.0f64).exp() * normal_cdf((-1.0 - x) / s)
            + e * normal_cdf((x - 1.0) / s)
            + (x + 0.5 * s * s).exp() * (normal_cdf((1.0 - x - s * s) / s) - normal_cdf((-1.0 - x - s * s) / s))
    }

    #[test]
    fn pinned_cole_hopf_value() {
        let o = OracleSolution::new(
            &DriverSpec::quadratic(1.0).unwrap(),
            &DriftSpec::zero(),
            &clamp1(),
            1.0,
            0.0,
            QuadratureMethod::default(),
        )
        .unwrap();
        assert!((o.y0 - COLE_HOPF_CLAMP_Y0).abs() < 1e-13, "{}", o.y0);
        assert!((clamp_exp_moment(0.0, 1.0).ln() - COLE_HOPF_CLAMP_Y0).abs() < 1e-13);
    }

    #[test]
    fn cole_hopf_matches_closed_form_off_center() {
        let o = OracleSolution::new(
            &DriverSpec::quadratic(1.0).unwrap(),
            &DriftSpec::zero(),
            &clamp1(),
            1.0,
            0.0,
            QuadratureMethod::default(),
        )
        .unwrap();
        for &(t, x) in &[(0.3, 0.4), (0.9, -1.2), (0.5, 2.5)] {
            let s = (1.0f64 - t).sqrt();
            assert!((o.y(t, x).unwrap() - clamp_exp_moment(x, s).ln()).abs() < 1e-12);
            let h = 1e-5;
            let fd = (clamp_exp_moment(x + h, s).ln() - clamp_exp_moment(x - h, s).ln()) / (2.0 * h);
            assert!((o.z(t, x).unwrap() - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn gauss_hermite_is_coarse_on_kinked_terminals() {
        let gh = OracleSolution::new(
            &DriverSpec::quadratic(1.0).unwrap(),
            &DriftSpec::zero(),
            &clamp1(),
            1.0,
            0.0,
            QuadratureMethod::GaussHermite { order: 80 },
        )
        .unwrap();
        let err = (gh.y0 - COLE_HOPF_CLAMP_Y0).abs();
        assert!(err > 1e-4 && err < 5e-3, "{err}");
    }

    #[test]
    fn cole_hopf_of_constant_is_the_constant() {
        for gamma in [0.5, 1.0, -2.0, 3.0] {
            let f = TerminalFunctional::terminal(PointKind::Constant(0.7), 1.0).unwrap();
            let o = OracleSolution::new(
                &DriverSpec::quadratic(gamma).unwrap(),
                &DriftSpec::zero(),
                &f,
                1.0,
                0.0,
                QuadratureMethod::default(),
            )
            .unwrap();
            assert!((o.y0 - 0.7).abs() < 1e-14);
            assert!(o.z0.abs() < 1e-14);
        }
    }

    #[test]
    fn zero_driver_brownian_terminal() {
        let f = TerminalFunctional::terminal(PointKind::Identity, f64::INFINITY).unwrap();
        let o = OracleSolution::new(&DriverSpec::zero(), &DriftSpec::zero(), &f, 1.0, 0.0, QuadratureMethod::default())
            .unwrap();
        assert!(o.y0.abs() < 1e-14);
        assert!((o.z0 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn linear_oracle_closed_form() {
        // Φ(x) = x: Y = e^{aτ}(x + cτ), Z = e^{aτ}
        let f = TerminalFunctional::terminal(PointKind::Identity, f64::INFINITY).unwrap();
        let (a, c) = (0.5, 0.3);
        let o = OracleSolution::new(
            &DriverSpec::linear(a, vec![c]).unwrap(),
            &DriftSpec::zero(),
            &f,
            1.0,
            0.2,
            QuadratureMethod::default(),
        )
        .unwrap();
        assert!((o.y0 - a.exp() * (0.2 + c)).abs() < 1e-13);
        assert!((o.z0 - a.exp()).abs() < 1e-13);
    }

    #[test]
    fn mismatched_setups_rejected() {
        let f = clamp1();
        let q = QuadratureMethod::default();
        assert!(OracleSolution::new(&DriverSpec::sin_quadratic(0.5).unwrap(), &DriftSpec::zero(), &f, 1.0, 0.0, q).is_err());
        assert!(OracleSolution::new(&DriverSpec::quadratic(1.0).unwrap(), &DriftSpec::sine(), &f, 1.0, 0.0, q).is_err());
        let lb = TerminalFunctional::lookback(1.0).unwrap();
        assert!(OracleSolution::new(&DriverSpec::zero(), &DriftSpec::zero(), &lb, 1.0, 0.0, q).is_err());
    }
}
