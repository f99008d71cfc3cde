//! Drift corpus, Euler-Maruyama with additive noise, coupled strong errors
//! and the quadrature-error study.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{sample_noise_range, NoiseEnsemble, NoiseMode, Partition, RefinementMap, refine_couple};
use crate::stats::MeanSe;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularity {
    Lipschitz,
    Holder(f64),
    Dini,
    BoundedMeasurable,
    TimeOnly,
    Constant,
}

type CustomEval = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
type CustomGrad = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Drifts of the shipped corpus act coordinatewise: `b(t,x)_k = f(t, x_k)`.
#[derive(Clone)]
pub enum DriftKind {
    Zero,
    Constant(f64),
    /// `a cos(t)`
    TimeOnly { amplitude: f64 },
    /// `sin(x)`
    Sine,
    /// `tanh(x)`
    Tanh,
    /// `sign(x) min(|x|^α, 1)`
    ClampedHolder { alpha: f64 },
    /// `1` for `x >= 0`, `-1` otherwise
    Step,
    /// Full vector field; the gradient, when given, fills a row-major
    /// `d x d` Jacobian.
    Custom { name: String, eval: CustomEval, grad: Option<CustomGrad> },
}

#[derive(Clone)]
pub struct DriftSpec {
    kind: DriftKind,
    bound: f64,
    regularity: Regularity,
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftSpec")
            .field("name", &self.name())
            .field("bound", &self.bound)
            .field("regularity", &self.regularity)
            .finish()
    }
}

impl DriftSpec {
    pub fn zero() -> Self {
        DriftSpec { kind: DriftKind::Zero, bound: 0.0, regularity: Regularity::Constant }
    }

    pub fn constant(c: f64) -> Self {
        DriftSpec { kind: DriftKind::Constant(c), bound: c.abs(), regularity: Regularity::Constant }
    }

    pub fn time_only(amplitude: f64) -> Self {
        DriftSpec { kind: DriftKind::TimeOnly { amplitude }, bound: amplitude.abs(), regularity: Regularity::TimeOnly }
    }

    pub fn sine() -> Self {
        DriftSpec { kind: DriftKind::Sine, bound: 1.0, regularity: Regularity::Lipschitz }
    }

    pub fn tanh() -> Self {
        DriftSpec { kind: DriftKind::Tanh, bound: 1.0, regularity: Regularity::Lipschitz }
    }

    pub fn clamped_holder(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::validation(format!("Hölder exponent must lie in (0, 1], got {alpha}")));
        }
        Ok(DriftSpec { kind: DriftKind::ClampedHolder { alpha }, bound: 1.0, regularity: Regularity::Holder(alpha) })
    }

    pub fn step() -> Self {
        DriftSpec { kind: DriftKind::Step, bound: 1.0, regularity: Regularity::BoundedMeasurable }
    }

    pub fn custom<F>(name: &str, eval: F, bound: f64, regularity: Regularity, grad: Option<CustomGrad>) -> Result<Self>
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if grad.is_some() != (regularity == Regularity::Lipschitz) {
            return Err(Error::validation("a custom drift has a gradient exactly when it is tagged lipschitz"));
        }
        Ok(DriftSpec {
            kind: DriftKind::Custom { name: name.to_string(), eval: Arc::new(eval), grad },
            bound,
            regularity,
        })
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn regularity(&self) -> Regularity {
        self.regularity
    }

    pub fn name(&self) -> String {
        match &self.kind {
            DriftKind::Zero => "zero".into(),
            DriftKind::Constant(_) => "constant".into(),
            DriftKind::TimeOnly { .. } => "time-only".into(),
            DriftKind::Sine => "sine".into(),
            DriftKind::Tanh => "tanh".into(),
            DriftKind::ClampedHolder { .. } => "clamped-holder".into(),
            DriftKind::Step => "step".into(),
            DriftKind::Custom { name, .. } => name.clone(),
        }
    }

    /// True when the drift does not depend on `x`.
    pub fn is_space_independent(&self) -> bool {
        matches!(self.kind, DriftKind::Zero | DriftKind::Constant(_) | DriftKind::TimeOnly { .. })
    }

    /// True when the drift does not depend on `t`.
    pub fn is_autonomous(&self) -> bool {
        !matches!(self.kind, DriftKind::TimeOnly { .. } | DriftKind::Custom { .. })
    }

    /// True when [`DriftSpec::gradient`] is available.
    pub fn has_gradient(&self) -> bool {
        match &self.kind {
            DriftKind::Sine | DriftKind::Tanh | DriftKind::Zero | DriftKind::Constant(_) | DriftKind::TimeOnly { .. } => true,
            DriftKind::Custom { grad, .. } => grad.is_some(),
            _ => false,
        }
    }

    /// Scalar profile `f(t, v)` of a coordinatewise drift.
    #[inline]
    pub fn scalar(&self, t: f64, v: f64) -> f64 {
        match &self.kind {
            DriftKind::Zero => 0.0,
            DriftKind::Constant(c) => *c,
            DriftKind::TimeOnly { amplitude } => amplitude * t.cos(),
            DriftKind::Sine => v.sin(),
            DriftKind::Tanh => v.tanh(),
            DriftKind::ClampedHolder { alpha } => {
                let a = v.abs();
                let m = if a >= 1.0 { 1.0 } else { a.powf(*alpha) };
                if v < 0.0 {
                    -m
                } else {
                    m
                }
            }
            DriftKind::Step => {
                if v >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            DriftKind::Custom { eval, .. } => {
                let mut out = [0.0];
                eval(t, &[v], &mut out);
                out[0]
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Custom { eval, .. } => eval(t, x, out),
            _ => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = self.scalar(t, *v);
                }
            }
        }
    }

    /// Row-major Jacobian `∂b_k/∂x_l`. Errors for drifts without a gradient.
    pub fn gradient(&self, t: f64, x: &[f64], jac: &mut [f64]) -> Result<()> {
        let d = x.len();
        match &self.kind {
            DriftKind::Sine | DriftKind::Tanh | DriftKind::Zero | DriftKind::Constant(_) | DriftKind::TimeOnly { .. } => {
                jac.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..d {
                    jac[k * d + k] = match self.kind {
                        DriftKind::Sine => x[k].cos(),
                        DriftKind::Tanh => 1.0 - x[k].tanh().powi(2),
                        _ => 0.0,
                    };
                }
                Ok(())
            }
            DriftKind::Custom { grad: Some(g), .. } => {
                g(t, x, jac);
                Ok(())
            }
            _ => Err(Error::validation(format!("drift '{}' has no spatial gradient", self.name()))),
        }
    }

    /// Samples the drift and checks `|b| <= bound`.
    pub fn spot_check_bound(&self, dims: usize, samples: usize) -> Result<()> {
        let mut out = vec![0.0; dims];
        for s in 0..samples {
            let t = (s as f64 * 0.618_033_988_749_895).fract();
            let x: Vec<f64> = (0..dims).map(|k| ((s * dims + k) as f64 * 0.754_877_666).fract() * 40.0 - 20.0).collect();
            self.eval(t, &x, &mut out);
            let n = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(out.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            let coord = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !n.is_finite() || coord > self.bound * (1.0 + 1e-12) {
                return Err(Error::validation(format!("drift exceeds its declared bound at t={t}, x={x:?}")));
            }
        }
        Ok(())
    }
}

/// Euler-Maruyama paths, `M x (N+1) x d`.
#[derive(Debug, Clone)]
pub struct EulerSolution {
    pub x0: Vec<f64>,
    pub drift: DriftSpec,
    pub noise: Arc<NoiseEnsemble>,
    pub values: Array3<f64>,
}

impl EulerSolution {
    pub fn partition(&self) -> &Partition {
        self.noise.partition()
    }

    pub fn paths(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn dims(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    /// Value of path `m` at node `i`, coordinate `k`.
    pub fn x(&self, m: usize, i: usize, k: usize) -> f64 {
        self.values[[m, i, k]]
    }

    /// Largest deviation of `X_{i+1} - X_i - b(t_i,X_i)δt_i` from the stored
    /// increment, relative to the local magnitude.
    pub fn scheme_defect(&self) -> f64 {
        let p = self.partition();
        let (m, n1, d) = self.values.dim();
        let mut worst = 0.0f64;
        let mut b = vec![0.0; d];
        for path in 0..m {
            for i in 0..n1 - 1 {
                let row = self.values.index_axis(Axis(0), path);
                let xi = row.row(i).to_vec();
                self.drift.eval(p.times()[i], &xi, &mut b);
                for k in 0..d {
                    let r = row[[i + 1, k]] - xi[k] - b[k] * p.delta()[i];
                    let scale = f64::EPSILON * (1.0 + row[[i + 1, k]].abs() + xi[k].abs());
                    worst = worst.max((r - self.noise.dw(path, i, k)).abs() / scale);
                }
            }
        }
        worst
    }
}

/// Explicit Euler-Maruyama: `X_{i+1} = X_i + b(t_i, X_i) δt_i + ΔW_i`.
pub fn euler_maruyama(x0: &[f64], drift: &DriftSpec, noise: Arc<NoiseEnsemble>) -> Result<EulerSolution> {
    let d = noise.dims();
    if x0.len() != d {
        return Err(Error::validation(format!("x0 has dimension {}, noise has {}", x0.len(), d)));
    }
    let p = noise.partition().clone();
    let n = p.steps();
    let m = noise.paths();
    let mut values = Array3::<f64>::zeros((m, n + 1, d));
    let inc = noise.increments();
    let failures: Vec<(usize, usize)> = values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .filter_map(|(path, mut out)| {
            let mut x = x0.to_vec();
            let mut b = vec![0.0; d];
            for k in 0..d {
                out[[0, k]] = x[k];
            }
            for i in 0..n {
                drift.eval(p.times()[i], &x, &mut b);
                for k in 0..d {
                    x[k] = x[k] + b[k] * p.delta()[i] + inc[[path, i, k]];
                    out[[i + 1, k]] = x[k];
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Some((path, i));
                }
            }
            None
        })
        .collect();
    if let Some(&(path, step)) = failures.iter().min() {
        return Err(Error::numerical(format!(
            "non-finite state on {} path(s); first at path {path}, step {step}, drift '{}'",
            failures.len(),
            drift.name()
        )));
    }
    Ok(EulerSolution { x0: x0.to_vec(), drift: drift.clone(), noise, values })
}

/// One row of a strong-error study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrongErrorEntry {
    pub n: usize,
    /// `E[sup_i |ΔX_i|²]^{1/2}`
    pub l2: f64,
    pub l2_ci: f64,
    /// `E[sup_i |ΔX_i|^{2p}]^{1/(2p)}`
    pub lp: f64,
    pub lp_ci: f64,
    pub p: u32,
}

fn check_coupled(coarse: &EulerSolution, reference: &EulerSolution, map: &RefinementMap) -> Result<()> {
    if coarse.partition() != map.coarse() || reference.partition() != map.fine() {
        return Err(Error::Uncoupled("solutions are not on the grids of the refinement map".into()));
    }
    let (a, b) = (coarse.noise.lineage(), reference.noise.lineage());
    if a != b {
        return Err(Error::Uncoupled(format!(
            "noise lineages differ (seed {} vs {}, offset {} vs {})",
            a.seed, b.seed, a.path_offset, b.path_offset
        )));
    }
    if coarse.paths() != reference.paths() || coarse.dims() != reference.dims() || coarse.x0 != reference.x0 {
        return Err(Error::Uncoupled("path count, dimension or initial state differ".into()));
    }
    Ok(())
}

/// Per-path `sup_j |X^coarse_j - X^ref(t_j)|` over coarse grid points.
pub fn sup_deviations(coarse: &EulerSolution, reference: &EulerSolution, map: &RefinementMap) -> Result<Vec<f64>> {
    check_coupled(coarse, reference, map)?;
    let nc = map.coarse().steps();
    let d = coarse.dims();
    Ok((0..coarse.paths())
        .into_par_iter()
        .map(|m| {
            let mut worst = 0.0f64;
            for j in 0..=nc {
                let jf = map.fine_node(j);
                let mut s = 0.0;
                for k in 0..d {
                    let e = coarse.values[[m, j, k]] - reference.values[[m, jf, k]];
                    s += e * e;
                }
                worst = worst.max(s.sqrt());
            }
            worst
        })
        .collect())
}

/// Turns per-path sup deviations into moment estimates.
pub fn strong_error_from_samples(n: usize, sup_dev: &[f64], p: u32) -> Result<StrongErrorEntry> {
    if p == 0 {
        return Err(Error::validation("moment order p must be at least 1"));
    }
    let (l2, l2_ci) = root_moment(sup_dev, 2);
    let (lp, lp_ci) = root_moment(sup_dev, 2 * p);
    Ok(StrongErrorEntry { n, l2, l2_ci, lp, lp_ci, p })
}

/// `E[D^q]^{1/q}` with a delta-method CI half-width.
fn root_moment(samples: &[f64], q: u32) -> (f64, f64) {
    let powered: Vec<f64> = samples.iter().map(|v| v.powi(q as i32)).collect();
    let ms = MeanSe::of(&powered);
    if ms.mean <= 0.0 {
        return (0.0, 0.0);
    }
    let root = ms.mean.powf(1.0 / q as f64);
    let ci = ms.ci() * root / (q as f64 * ms.mean);
    (root, ci)
}

/// Coupled strong error of `coarse` against `reference`.
pub fn strong_error(coarse: &EulerSolution, reference: &EulerSolution, map: &RefinementMap, p: u32) -> Result<StrongErrorEntry> {
    let dev = sup_deviations(coarse, reference, map)?;
    strong_error_from_samples(map.coarse().steps(), &dev, p)
}

/// Sweep settings shared by the forward studies.
#[derive(Debug, Clone)]
pub struct ForwardSweep {
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub n_list: Vec<usize>,
    pub paths: usize,
    pub p: u32,
    /// fine steps per coarse step
    pub factor: usize,
    pub mode: NoiseMode,
    pub seed: u64,
    /// paths held in memory at once
    pub chunk: usize,
}

/// Runs the strong-error study for one `N`, chunking over paths so the fine
/// reference never has to be held in memory in full.
pub fn strong_error_point(drift: &DriftSpec, sweep: &ForwardSweep, n: usize) -> Result<StrongErrorEntry> {
    let coarse_p = Partition::uniform(sweep.horizon, n)?;
    let map = RefinementMap::uniform(&coarse_p, sweep.factor)?;
    let d = sweep.x0.len();
    let chunk = sweep.chunk.max(1);
    let mut dev = Vec::with_capacity(sweep.paths);
    let mut start = 0usize;
    while start < sweep.paths {
        let len = chunk.min(sweep.paths - start);
        let fine_noise = sample_noise_range(map.fine(), start as u64, len, d, sweep.mode, sweep.seed)?;
        let coarse_noise = refine_couple(&fine_noise, &map)?;
        let fine = euler_maruyama(&sweep.x0, drift, Arc::new(fine_noise))?;
        let coarse = euler_maruyama(&sweep.x0, drift, Arc::new(coarse_noise))?;
        dev.extend(sup_deviations(&coarse, &fine, &map)?);
        start += len;
    }
    strong_error_from_samples(n, &dev, sweep.p)
}

/// One row of the quadrature study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureEntry {
    pub n: usize,
    /// `E[sup_t |V_t^N|^{2p}]`
    pub moment: f64,
    pub moment_ci: f64,
    pub p: u32,
}

/// Settings of the quadrature study. The horizon is 1.
#[derive(Debug, Clone)]
pub struct QuadratureSweep {
    pub n_list: Vec<usize>,
    pub paths: usize,
    pub p: u32,
    /// fine steps per coarse step of the largest `N`
    pub factor: usize,
    pub seed: u64,
    pub chunk: usize,
}

/// Estimates `E[sup_{t<=1} |∫_0^t b(s,W_s) - b(s,W_{k_N(s)}) ds|^{2p}]` for each
/// `N`. All `N` share one fine Brownian path per sample; integrals are left
/// Riemann sums on the fine grid and the sup runs over fine nodes.
pub fn quadrature_sweep(drift: &DriftSpec, sweep: &QuadratureSweep) -> Result<Vec<QuadratureEntry>> {
    if !drift.bound().is_finite() {
        return Err(Error::validation("quadrature study needs a bounded drift"));
    }
    if sweep.n_list.is_empty() || sweep.p == 0 || sweep.factor < 16 {
        return Err(Error::validation("quadrature study needs N values, p >= 1 and a fine factor >= 16"));
    }
    let n_max = *sweep.n_list.iter().max().unwrap();
    let fine_steps = n_max * sweep.factor;
    for &n in &sweep.n_list {
        if n == 0 || fine_steps % n != 0 {
            return Err(Error::validation(format!("N = {n} does not divide the fine grid of {fine_steps} steps")));
        }
    }
    let fine = Partition::uniform(1.0, fine_steps)?;
    let dt = 1.0 / fine_steps as f64;
    let times = fine.times().to_vec();
    let chunk = sweep.chunk.max(1);
    let q = 2 * sweep.p as i32;
    let autonomous = drift.is_autonomous();
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(sweep.paths); sweep.n_list.len()];
    let mut start = 0usize;
    while start < sweep.paths {
        let len = chunk.min(sweep.paths - start);
        let noise = sample_noise_range(&fine, start as u64, len, 1, NoiseMode::Gaussian, sweep.seed)?;
        let rows: Vec<Vec<f64>> = (0..len)
            .into_par_iter()
            .map(|m| {
                let mut w = vec![0.0; fine_steps + 1];
                for i in 0..fine_steps {
                    w[i + 1] = w[i] + noise.dw(m, i, 0);
                }
                let bw: Vec<f64> = (0..fine_steps).map(|i| drift.scalar(times[i], w[i])).collect();
                sweep
                    .n_list
                    .iter()
                    .map(|&n| {
                        let ratio = fine_steps / n;
                        let mut v = 0.0f64;
                        let mut sup = 0.0f64;
                        for j in 0..n {
                            let wk = w[j * ratio];
                            let frozen = drift.scalar(times[j * ratio], wk);
                            for i in j * ratio..(j + 1) * ratio {
                                let bk = if autonomous { frozen } else { drift.scalar(times[i], wk) };
                                v += (bw[i] - bk) * dt;
                                sup = sup.max(v.abs());
                            }
                        }
                        sup.powi(q)
                    })
                    .collect()
            })
            .collect();
        for row in rows {
            for (k, v) in row.into_iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::numerical("non-finite quadrature error"));
                }
                samples[k].push(v);
            }
        }
        start += len;
    }
    Ok(sweep
        .n_list
        .iter()
        .zip(samples)
        .map(|(&n, s)| {
            let ms = MeanSe::of(&s);
            QuadratureEntry { n, moment: ms.mean, moment_ci: ms.ci(), p: sweep.p }
        })
        .collect())
}

/// Quadrature moment for a single `N`.
pub fn quadrature_error(drift: &DriftSpec, n: usize, paths: usize, p: u32, seed: u64) -> Result<QuadratureEntry> {
    let sweep = QuadratureSweep { n_list: vec![n], paths, p, factor: 16, seed, chunk: 1024 };
    Ok(quadrature_sweep(drift, &sweep)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::sample_noise;

    fn noise(n: usize, m: usize, d: usize) -> Arc<NoiseEnsemble> {
        Arc::new(sample_noise(&Partition::uniform(1.0, n).unwrap(), m, d, NoiseMode::Gaussian, 42).unwrap())
    }

    #[test]
    fn zero_drift_gives_brownian_paths() {
        let nz = noise(16, 20, 2);
        let sol = euler_maruyama(&[0.0, 0.0], &DriftSpec::zero(), nz.clone()).unwrap();
        for m in 0..20 {
            for i in 0..=16 {
                for k in 0..2 {
                    assert_eq!(sol.x(m, i, k), nz.path_value(m, i, k));
                }
            }
        }
    }

    #[test]
    fn constant_drift_is_exact() {
        let nz = noise(32, 10, 1);
        let c = 0.7;
        let sol = euler_maruyama(&[0.3], &DriftSpec::constant(c), nz.clone()).unwrap();
        let p = nz.partition();
        for m in 0..10 {
            for i in 0..=32 {
                let exact = 0.3 + c * p.times()[i] + nz.path_value(m, i, 0);
                assert!((sol.x(m, i, 0) - exact).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn scheme_identity_holds_to_rounding() {
        for drift in [DriftSpec::sine(), DriftSpec::clamped_holder(0.5).unwrap(), DriftSpec::step()] {
            let sol = euler_maruyama(&[0.1], &drift, noise(64, 50, 1)).unwrap();
            assert!(sol.scheme_defect() <= 8.0, "{}", sol.scheme_defect());
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(euler_maruyama(&[0.0], &DriftSpec::zero(), noise(4, 3, 2)).is_err());
    }

    #[test]
    fn nonfinite_drift_reported() {
        let bad = DriftSpec::custom("nan", |_, _, out: &mut [f64]| out[0] = f64::NAN, 1.0, Regularity::Dini, None).unwrap();
        let err = euler_maruyama(&[0.0], &bad, noise(4, 3, 1)).unwrap_err();
        assert!(!err.is_validation());
    }

    #[test]
    fn holder_drift_profile() {
        let b = DriftSpec::clamped_holder(0.5).unwrap();
        assert_eq!(b.scalar(0.0, 0.25), 0.5);
        assert_eq!(b.scalar(0.0, -0.25), -0.5);
        assert_eq!(b.scalar(0.0, 9.0), 1.0);
        assert_eq!(b.scalar(0.0, 0.0), 0.0);
        for drift in [b, DriftSpec::sine(), DriftSpec::step(), DriftSpec::tanh(), DriftSpec::time_only(-2.0)] {
            drift.spot_check_bound(3, 2000).unwrap();
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for drift in [DriftSpec::sine(), DriftSpec::tanh()] {
            let x = [0.3, -1.1];
            let mut jac = [0.0; 4];
            drift.gradient(0.0, &x, &mut jac).unwrap();
            let h = 1e-6;
            for k in 0..2 {
                let fd = (drift.scalar(0.0, x[k] + h) - drift.scalar(0.0, x[k] - h)) / (2.0 * h);
                assert!((fd - jac[k * 2 + k]).abs() < 1e-8);
            }
            assert_eq!(jac[1], 0.0);
        }
        let mut jac = [0.0];
        assert!(DriftSpec::step().gradient(0.0, &[0.0], &mut jac).is_err());
    }

    #[test]
    fn self_comparison_is_zero() {
        let nz = noise(16, 30, 1);
        let sol = euler_maruyama(&[0.0], &DriftSpec::sine(), nz).unwrap();
        let map = RefinementMap::uniform(sol.partition(), 1).unwrap();
        let e = strong_error(&sol, &sol, &map, 2).unwrap();
        assert_eq!((e.l2, e.lp), (0.0, 0.0));
    }

    #[test]
    fn exact_drifts_have_zero_coupled_error() {
        let coarse_p = Partition::uniform(1.0, 8).unwrap();
        let map = RefinementMap::uniform(&coarse_p, 8).unwrap();
        let fine_noise = sample_noise(map.fine(), 40, 1, NoiseMode::Gaussian, 3).unwrap();
        let coarse_noise = refine_couple(&fine_noise, &map).unwrap();
        for drift in [DriftSpec::zero(), DriftSpec::constant(-0.4)] {
            let fine = euler_maruyama(&[0.0], &drift, Arc::new(fine_noise.clone())).unwrap();
            let coarse = euler_maruyama(&[0.0], &drift, Arc::new(coarse_noise.clone())).unwrap();
            let e = strong_error(&coarse, &fine, &map, 1).unwrap();
            assert!(e.l2 < 1e-13, "{}", e.l2);
        }
    }

    #[test]
    fn uncoupled_inputs_rejected() {
        let coarse_p = Partition::uniform(1.0, 4).unwrap();
        let map = RefinementMap::uniform(&coarse_p, 2).unwrap();
        let fine = sample_noise(map.fine(), 5, 1, NoiseMode::Gaussian, 1).unwrap();
        let other = sample_noise(map.fine(), 5, 1, NoiseMode::Gaussian, 2).unwrap();
        let coarse = refine_couple(&other, &map).unwrap();
        let a = euler_maruyama(&[0.0], &DriftSpec::sine(), Arc::new(coarse)).unwrap();
        let b = euler_maruyama(&[0.0], &DriftSpec::sine(), Arc::new(fine)).unwrap();
        assert!(matches!(strong_error(&a, &b, &map, 1), Err(Error::Uncoupled(_))));
    }

    #[test]
    fn chunking_does_not_change_the_estimate() {
        let drift = DriftSpec::clamped_holder(0.5).unwrap();
        let mut sweep = ForwardSweep {
            horizon: 1.0,
            x0: vec![0.0],
            n_list: vec![8],
            paths: 300,
            p: 2,
            factor: 4,
            mode: NoiseMode::Gaussian,
            seed: 5,
            chunk: 300,
        };
        let a = strong_error_point(&drift, &sweep, 8).unwrap();
        sweep.chunk = 7;
        let b = strong_error_point(&drift, &sweep, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadrature_vanishes_for_space_independent_drifts() {
        for drift in [DriftSpec::constant(0.3), DriftSpec::time_only(1.5), DriftSpec::zero()] {
            let e = quadrature_error(&drift, 8, 50, 1, 9).unwrap();
            assert_eq!(e.moment, 0.0);
        }
    }

    #[test]
    fn quadrature_rejects_unbounded_drift() {
        let b = DriftSpec::custom("lin", |_, x: &[f64], o: &mut [f64]| o[0] = x[0], f64::INFINITY, Regularity::Dini, None)
            .unwrap();
        assert!(quadrature_error(&b, 8, 10, 1, 0).is_err());
    }
}
