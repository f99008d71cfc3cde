//! Quadratic drivers, their truncation, and terminal path functionals.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::grid::Partition;

/// A backward-equation generator `g(t, x, y, z)`.
pub trait Driver: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;
}

type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
type EllFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Growth constants of a quadratic driver:
/// `|g| <= Λ₀ + Λ_y |y| + Λ_z (|z| + 2 ℓ(|y|) |z|²)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GrowthConstants {
    pub lambda0: f64,
    pub lambda_y: f64,
    pub lambda_z: f64,
    pub lambda_x: f64,
    pub lambda_t: f64,
    pub alpha0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverTag {
    LipschitzY,
    StochasticLipschitz,
}

#[derive(Clone)]
pub enum DriverKind {
    /// `(γ/2)|z|²`
    Quadratic { gamma: f64 },
    /// `a y + c·z`
    Linear { a: f64, c: Vec<f64> },
    /// `sin(y)(1 + |z|^α₀) + min(|y|, 1)|z|²/(1 + |z|)`
    SinQuadratic { alpha0: f64 },
    Zero,
    /// base driver plus a constant
    Shifted { base: Box<DriverSpec>, shift: f64 },
    Custom { name: String, eval: DriverFn },
}

#[derive(Clone)]
pub struct DriverSpec {
    kind: DriverKind,
    constants: GrowthConstants,
    ell: EllFn,
    tag: DriverTag,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("name", &self.name())
            .field("constants", &self.constants)
            .field("tag", &self.tag)
            .finish()
    }
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm2(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum()
}

impl DriverSpec {
    pub fn quadratic(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::validation("gamma must be finite"));
        }
        Ok(DriverSpec {
            kind: DriverKind::Quadratic { gamma },
            constants: GrowthConstants { lambda_z: gamma.abs() / 4.0, alpha0: 0.5, ..Default::default() },
            ell: Arc::new(|_| 1.0),
            tag: DriverTag::LipschitzY,
        })
    }

    pub fn linear(a: f64, c: Vec<f64>) -> Result<Self> {
        if !a.is_finite() || c.iter().any(|v| !v.is_finite()) || c.is_empty() {
            return Err(Error::validation("linear driver needs finite a and a non-empty finite c"));
        }
        let lambda_z = norm(&c);
        Ok(DriverSpec {
            kind: DriverKind::Linear { a, c },
            constants: GrowthConstants { lambda_y: a.abs(), lambda_z, alpha0: 0.5, ..Default::default() },
            ell: Arc::new(|_| 0.0),
            tag: DriverTag::LipschitzY,
        })
    }

    pub fn sin_quadratic(alpha0: f64) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0 < 1.0) {
            return Err(Error::validation(format!("alpha0 must lie in (0, 1), got {alpha0}")));
        }
        Ok(DriverSpec {
            kind: DriverKind::SinQuadratic { alpha0 },
            constants: GrowthConstants { lambda0: 1.0, lambda_y: 1.0, lambda_z: 1.0, alpha0, ..Default::default() },
            ell: Arc::new(|v: f64| v.min(1.0)),
            tag: DriverTag::StochasticLipschitz,
        })
    }

    pub fn zero() -> Self {
        DriverSpec {
            kind: DriverKind::Zero,
            constants: GrowthConstants { alpha0: 0.5, ..Default::default() },
            ell: Arc::new(|_| 0.0),
            tag: DriverTag::LipschitzY,
        }
    }

    pub fn shifted(base: DriverSpec, shift: f64) -> Self {
        let mut constants = base.constants;
        constants.lambda0 += shift.abs();
        let ell = base.ell.clone();
        let tag = base.tag;
        DriverSpec { kind: DriverKind::Shifted { base: Box::new(base), shift }, constants, ell, tag }
    }

    /// User driver with declared constants; only spot-checked.
    pub fn custom<F, L>(name: &str, eval: F, constants: GrowthConstants, ell: L, tag: DriverTag) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
        L: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        DriverSpec {
            kind: DriverKind::Custom { name: name.to_string(), eval: Arc::new(eval) },
            constants,
            ell: Arc::new(ell),
            tag,
        }
    }

    pub fn kind(&self) -> &DriverKind {
        &self.kind
    }

    pub fn constants(&self) -> GrowthConstants {
        self.constants
    }

    pub fn tag(&self) -> DriverTag {
        self.tag
    }

    pub fn ell(&self, v: f64) -> f64 {
        (self.ell)(v)
    }

    pub fn name(&self) -> String {
        match &self.kind {
            DriverKind::Quadratic { .. } => "quadratic".into(),
            DriverKind::Linear { .. } => "linear".into(),
            DriverKind::SinQuadratic { .. } => "sin-quadratic".into(),
            DriverKind::Zero => "zero".into(),
            DriverKind::Shifted { base, .. } => format!("shifted-{}", base.name()),
            DriverKind::Custom { name, .. } => name.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, DriverKind::Zero)
    }

    /// Lipschitz constant in `z` (Euclidean) of the driver truncated at level
    /// `n` in dimension `dims`, when it is known in closed form.
    pub fn truncated_z_lipschitz(&self, n: f64, dims: usize) -> Option<f64> {
        match &self.kind {
            DriverKind::Quadratic { gamma } => Some(gamma.abs() * n * (dims as f64).sqrt()),
            DriverKind::Linear { c, .. } => Some(norm(c)),
            DriverKind::Zero => Some(0.0),
            DriverKind::Shifted { base, .. } => base.truncated_z_lipschitz(n, dims),
            DriverKind::SinQuadratic { .. } | DriverKind::Custom { .. } => None,
        }
    }

    /// Right-hand side of the declared growth inequality.
    pub fn growth_bound(&self, y: f64, z: &[f64]) -> f64 {
        let c = self.constants;
        let zn = norm(z);
        c.lambda0 + c.lambda_y * y.abs() + c.lambda_z * (zn + 2.0 * self.ell(y.abs()) * zn * zn)
    }

    /// Spot-checks `|g(t,x,0,0)| <= Λ₀` and the growth inequality on random
    /// points. Returns the first violating point.
    pub fn check_growth(&self, dims: usize, samples: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unif = |scale: f64| {
            let u = (rng.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0;
            scale * (2.0 * u - 1.0)
        };
        let tol = 1e-12;
        for _ in 0..samples {
            let scale = 10f64.powf(unif(2.0));
            let t = unif(1.0).abs();
            let x: Vec<f64> = (0..dims).map(|_| unif(scale)).collect();
            let y = unif(scale);
            let z: Vec<f64> = (0..dims).map(|_| unif(scale)).collect();
            let zero = vec![0.0; dims];
            let g0 = self.eval(t, &x, 0.0, &zero);
            if g0.abs() > self.constants.lambda0 * (1.0 + tol) + tol {
                return Err(Error::validation(format!("|g(t,x,0,0)| = {g0} exceeds Λ₀ at t={t}, x={x:?}")));
            }
            let g = self.eval(t, &x, y, &z);
            let b = self.growth_bound(y, &z);
            if !g.is_finite() || g.abs() > b * (1.0 + tol) + tol {
                return Err(Error::validation(format!(
                    "growth bound violated: |g| = {} > {b} at t={t}, y={y}, z={z:?}",
                    g.abs()
                )));
            }
        }
        Ok(())
    }
}

impl Driver for DriverSpec {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        match &self.kind {
            DriverKind::Quadratic { gamma } => 0.5 * gamma * norm2(z),
            DriverKind::Linear { a, c } => a * y + c.iter().zip(z).map(|(c, z)| c * z).sum::<f64>(),
            DriverKind::SinQuadratic { alpha0 } => {
                let zn = norm(z);
                y.sin() * (1.0 + zn.powf(*alpha0)) + y.abs().min(1.0) * zn * zn / (1.0 + zn)
            }
            DriverKind::Zero => 0.0,
            DriverKind::Shifted { base, shift } => base.eval(t, x, y, z) + shift,
            DriverKind::Custom { eval, .. } => eval(t, x, y, z),
        }
    }
}

/// Hard clamp of `v` to `[-n, n]`.
pub fn clamp_level(v: f64, n: f64) -> f64 {
    v.max(-n).min(n)
}

/// A driver evaluated at clamped arguments:
/// `g_n(t,x,y,z) = g(t, x, clamp_n(y), clamp_n(z))`, `z` coordinatewise.
#[derive(Debug, Clone)]
pub struct TruncatedDriver {
    base: DriverSpec,
    n: f64,
}

pub fn truncate_driver(base: DriverSpec, n: f64) -> Result<TruncatedDriver> {
    if !(n > 0.0) {
        return Err(Error::validation(format!("truncation level must be positive, got {n}")));
    }
    Ok(TruncatedDriver { base, n })
}

impl TruncatedDriver {
    pub fn base(&self) -> &DriverSpec {
        &self.base
    }

    pub fn level(&self) -> f64 {
        self.n
    }
}

impl Driver for TruncatedDriver {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let n = self.n;
        if z.len() <= 8 {
            let mut buf = [0.0f64; 8];
            for (b, v) in buf.iter_mut().zip(z) {
                *b = clamp_level(*v, n);
            }
            self.base.eval(t, x, clamp_level(y, n), &buf[..z.len()])
        } else {
            let zc: Vec<f64> = z.iter().map(|v| clamp_level(*v, n)).collect();
            self.base.eval(t, x, clamp_level(y, n), &zc)
        }
    }
}

/// Default truncation level `max(2‖ξ‖∞ e^{1+Λ_y T}, 10)`.
pub fn default_truncation(xi_bound: f64, lambda_y: f64, horizon: f64) -> f64 {
    (2.0 * xi_bound * (1.0 + lambda_y * horizon).exp()).max(10.0)
}

/// Lipschitz class of a path functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LipschitzClass {
    /// `|Φ(x) - Φ(y)| <= Λ sup_t |x_t - y_t|`
    Sup(f64),
    /// `|Φ(x) - Φ(y)| <= Λ ∫ |x_t - y_t| dt`
    L1(f64),
    Unknown,
}

type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Terminal value functions of `X_T`. They act on `s = Σ_k X_T^k`.
#[derive(Clone)]
pub enum PointKind {
    Identity,
    Clamp { level: f64 },
    Sine,
    Constant(f64),
    Custom { name: String, phi: PointFn },
}

#[derive(Clone)]
pub enum TerminalKind {
    TerminalOnly(PointKind),
    /// `max_i |X_{t_i}|`
    Lookback,
    /// `Σ_i X_{t_i} δt_i` (left endpoints)
    Asian,
    /// `φ(X_{s_0}, ..., X_{s_r})` with `X_{s_j}` taken at the grid point at
    /// or before `s_j`. Arguments are the first coordinate.
    Discrete {
        times: Vec<f64>,
        phi: PointFn,
        /// per-argument Lipschitz constants
        lipschitz: Vec<f64>,
        /// Lipschitz sum recorded for the functional
        lipschitz_sum: f64,
    },
}

#[derive(Clone)]
pub struct TerminalFunctional {
    kind: TerminalKind,
    bound: f64,
    class: LipschitzClass,
}

impl fmt::Debug for TerminalFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalFunctional")
            .field("name", &self.name())
            .field("bound", &self.bound)
            .field("class", &self.class)
            .finish()
    }
}

impl TerminalFunctional {
    /// `bound` is `‖ξ‖∞`; values are clamped to it. Pass `f64::INFINITY`
    /// for an unclamped functional.
    pub fn terminal(kind: PointKind, bound: f64) -> Result<Self> {
        check_bound(bound)?;
        let class = match &kind {
            PointKind::Identity | PointKind::Clamp { .. } | PointKind::Sine => LipschitzClass::Sup(1.0),
            PointKind::Constant(_) => LipschitzClass::Sup(0.0),
            PointKind::Custom { .. } => LipschitzClass::Unknown,
        };
        if let PointKind::Clamp { level } = kind {
            if !(level > 0.0) {
                return Err(Error::validation("clamp level must be positive"));
            }
        }
        Ok(TerminalFunctional { kind: TerminalKind::TerminalOnly(kind), bound, class })
    }

    pub fn lookback(bound: f64) -> Result<Self> {
        check_bound(bound)?;
        Ok(TerminalFunctional { kind: TerminalKind::Lookback, bound, class: LipschitzClass::Sup(1.0) })
    }

    pub fn asian(bound: f64) -> Result<Self> {
        check_bound(bound)?;
        Ok(TerminalFunctional { kind: TerminalKind::Asian, bound, class: LipschitzClass::L1(1.0) })
    }

    pub fn discrete<F>(times: Vec<f64>, phi: F, lipschitz: Vec<f64>, bound: f64) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        check_bound(bound)?;
        if times.is_empty() || lipschitz.len() != times.len() {
            return Err(Error::validation("discrete functional needs one Lipschitz constant per monitoring time"));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::validation("monitoring times must be non-decreasing"));
        }
        let lipschitz_sum: f64 = lipschitz.iter().sum();
        Ok(TerminalFunctional {
            kind: TerminalKind::Discrete { times, phi: Arc::new(phi), lipschitz, lipschitz_sum },
            bound,
            class: LipschitzClass::Unknown,
        })
    }

    pub fn kind(&self) -> &TerminalKind {
        &self.kind
    }

    /// `‖ξ‖∞`
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn class(&self) -> LipschitzClass {
        self.class
    }

    pub fn name(&self) -> String {
        match &self.kind {
            TerminalKind::TerminalOnly(PointKind::Identity) => "identity".into(),
            TerminalKind::TerminalOnly(PointKind::Clamp { .. }) => "clamp".into(),
            TerminalKind::TerminalOnly(PointKind::Sine) => "sine".into(),
            TerminalKind::TerminalOnly(PointKind::Constant(_)) => "constant".into(),
            TerminalKind::TerminalOnly(PointKind::Custom { name, .. }) => name.clone(),
            TerminalKind::Lookback => "lookback".into(),
            TerminalKind::Asian => "asian".into(),
            TerminalKind::Discrete { .. } => "discrete".into(),
        }
    }

    pub fn is_terminal_only(&self) -> bool {
        matches!(self.kind, TerminalKind::TerminalOnly(_))
    }

    /// Per-argument Lipschitz constants and their sum for the discrete kind.
    pub fn discrete_lipschitz(&self) -> Option<(&[f64], f64)> {
        match &self.kind {
            TerminalKind::Discrete { lipschitz, lipschitz_sum, .. } => Some((lipschitz, *lipschitz_sum)),
            _ => None,
        }
    }

    /// `Φ` as a function of a scalar terminal state, for terminal-only kinds.
    pub fn point_value(&self, x: f64) -> Option<f64> {
        match &self.kind {
            TerminalKind::TerminalOnly(p) => Some(clamp_level(eval_point(p, &[x]), self.bound)),
            _ => None,
        }
    }

    /// Points where the scalar terminal function may fail to be smooth.
    pub fn kinks(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let TerminalKind::TerminalOnly(p) = &self.kind {
            match p {
                PointKind::Clamp { level } => out.extend([-level, *level]),
                PointKind::Identity => {}
                _ => return out,
            }
            if self.bound.is_finite() {
                out.extend([-self.bound, self.bound]);
            }
        }
        out
    }

    /// Checks that the monitoring times fit the partition.
    pub fn validate_on(&self, partition: &Partition) -> Result<()> {
        if let TerminalKind::Discrete { times, .. } = &self.kind {
            for &s in times {
                partition.floor_index(s)?;
            }
        }
        Ok(())
    }

    /// Evaluates the functional on one discrete path (`(N+1) x d`).
    pub fn eval(&self, partition: &Partition, path: ArrayView2<f64>) -> Result<f64> {
        let n = partition.steps();
        if path.nrows() != n + 1 {
            return Err(Error::validation(format!("path has {} nodes, partition has {}", path.nrows(), n + 1)));
        }
        let raw = match &self.kind {
            TerminalKind::TerminalOnly(p) => eval_point(p, &path.row(n).to_vec()),
            TerminalKind::Lookback => path.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max),
            TerminalKind::Asian => {
                let dt = partition.delta();
                (0..n).map(|i| path.row(i).sum() * dt[i]).sum()
            }
            TerminalKind::Discrete { times, phi, .. } => {
                let mut args = Vec::with_capacity(times.len());
                for &s in times {
                    let i = monitor_index(partition, s)?;
                    args.push(path[[i, 0]]);
                }
                phi(&args)
            }
        };
        if !raw.is_finite() {
            return Err(Error::numerical("terminal functional returned a non-finite value"));
        }
        Ok(clamp_level(raw, self.bound))
    }

    /// Evaluates the functional on every path of `values` (`M x (N+1) x d`).
    pub fn eval_paths(&self, partition: &Partition, values: &Array3<f64>) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        self.validate_on(partition)?;
        values.axis_iter(Axis(0)).into_par_iter().map(|p| self.eval(partition, p)).collect()
    }

    /// Running statistic that makes the value function Markovian in the
    /// augmented state: running max of `|X|` for lookback, running left
    /// Riemann integral for asian. `None` for other kinds.
    pub fn running_statistics(&self, partition: &Partition, values: &Array3<f64>) -> Option<Array2<f64>> {
        let (m, nodes, _) = values.dim();
        let dt = partition.delta();
        match self.kind {
            TerminalKind::Lookback => {
                let mut out = Array2::zeros((m, nodes));
                for p in 0..m {
                    let mut run = 0.0f64;
                    for i in 0..nodes {
                        let r = values.index_axis(Axis(0), p);
                        let r = r.row(i);
                        run = run.max(r.dot(&r).sqrt());
                        out[[p, i]] = run;
                    }
                }
                Some(out)
            }
            TerminalKind::Asian => {
                let mut out = Array2::zeros((m, nodes));
                for p in 0..m {
                    let mut run = 0.0;
                    for i in 0..nodes {
                        out[[p, i]] = run;
                        if i + 1 < nodes {
                            run += values.index_axis(Axis(0), p).row(i).sum() * dt[i];
                        }
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }
}

fn check_bound(bound: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::validation(format!("terminal bound must be positive, got {bound}")));
    }
    Ok(())
}

fn eval_point(kind: &PointKind, x: &[f64]) -> f64 {
    let s: f64 = x.iter().sum();
    match kind {
        PointKind::Identity => s,
        PointKind::Clamp { level } => clamp_level(s, *level),
        PointKind::Sine => s.sin(),
        PointKind::Constant(c) => *c,
        PointKind::Custom { phi, .. } => phi(x),
    }
}

/// Grid node used for a monitoring time: the last node at or before `s`.
/// Unlike interval lookup, `s = T` maps to the terminal node.
fn monitor_index(partition: &Partition, s: f64) -> Result<usize> {
    let i = partition.floor_index(s)?;
    if s >= partition.times()[i + 1] {
        Ok(i + 1)
    } else {
        Ok(i)
    }
}

/// Turns a lookback or asian functional into its discrete counterpart on
/// `partition`, monitored at every grid node.
pub fn discretize_functional(functional: &TerminalFunctional, partition: &Partition) -> Result<TerminalFunctional> {
    let times = partition.times().to_vec();
    let n = partition.steps();
    let bound = functional.bound;
    match functional.kind {
        TerminalKind::Lookback => {
            let mut f = TerminalFunctional::discrete(
                times,
                |args: &[f64]| args.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                vec![1.0; n + 1],
                bound,
            )?;
            // a max over nodes is 1-Lipschitz for the sup norm as a whole
            if let TerminalKind::Discrete { lipschitz_sum, .. } = &mut f.kind {
                *lipschitz_sum = 1.0;
            }
            f.class = LipschitzClass::Sup(1.0);
            Ok(f)
        }
        TerminalKind::Asian => {
            let mut weights = partition.delta().to_vec();
            weights.push(0.0);
            let w = weights.clone();
            let mut f = TerminalFunctional::discrete(
                times,
                move |args: &[f64]| args.iter().zip(&w).map(|(a, w)| a * w).sum(),
                weights,
                bound,
            )?;
            f.class = LipschitzClass::L1(1.0);
            Ok(f)
        }
        _ => Err(Error::validation("only lookback and asian functionals can be discretized")),
    }
}
