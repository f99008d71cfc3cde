//! The explicit backward scheme
//!
//! ```text
//! Y_N = Φ(X),  Z_N = 0
//! Z_i = E[Y_{i+1} H_i | F_i]
//! Y_i = E[Y_{i+1} | F_i] + g_n(t_i, X_i, E[Y_{i+1} | F_i], Z_i) δt_i
//! ```
//!
//! with centered weights `H_i`, plus the scheme-level checks (uniform bound,
//! discrete BMO statistic, centered residual) and the Malliavin-weight
//! estimator of `Z`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::condexp::{weighted_apply, CondExpEstimator, Regressors, StepDiagnostics};
use crate::driver::{Driver, TerminalFunctional};
use crate::error::{Error, Result};
use crate::forward::EulerSolution;
use crate::grid::{Lineage, NoiseEnsemble, NoiseMode, Partition};
use crate::quadrature::{normal_cdf, normal_pdf};
use crate::stats::MeanSe;

type CustomWeightFn = Arc<dyn Fn(&NoiseEnsemble, usize) -> Array2<f64> + Send + Sync>;

/// Weight family used to extract `Z`.
#[derive(Clone)]
pub enum WeightSpec {
    /// `H = clamp(ΔW/δt, ±R/√δt)` coordinatewise; `None` uses `R = 2√(ln N)`.
    ClampedGaussian { r: Option<f64> },
    /// `H = ΔW/δt` for Rademacher noise.
    RademacherNative,
    /// User weights with their declared second-moment scales `c_i`.
    Custom { name: String, c: Vec<f64>, build: CustomWeightFn },
}

impl fmt::Debug for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSpec::ClampedGaussian { r } => write!(f, "ClampedGaussian({r:?})"),
            WeightSpec::RademacherNative => write!(f, "RademacherNative"),
            WeightSpec::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl WeightSpec {
    pub fn name(&self) -> String {
        match self {
            WeightSpec::ClampedGaussian { .. } => "clamped-gaussian".into(),
            WeightSpec::RademacherNative => "rademacher-native".into(),
            WeightSpec::Custom { name, .. } => name.clone(),
        }
    }
}

/// Default clamp level `2√(ln N)`, with `ln 2` used below `N = 2`.
pub fn default_clamp_level(steps: usize) -> f64 {
    2.0 * (steps.max(2) as f64).ln().sqrt()
}

/// `E[clamp(G, ±R)²]` for a standard normal `G`.
pub fn clamped_second_moment(r: f64) -> f64 {
    (2.0 * normal_cdf(r) - 1.0) - 2.0 * r * normal_pdf(r) + 2.0 * r * r * (1.0 - normal_cdf(r))
}

/// `clamp(ΔW/δt, ±R/√δt)`.
pub fn clamped_weight(dw: f64, dt: f64, r: f64) -> f64 {
    let bound = r / dt.sqrt();
    (dw / dt).clamp(-bound, bound)
}

/// Accepted range for the scales `c_i`.
pub const SCALE_RANGE: (f64, f64) = (0.05, 20.0);

/// Weights resolved against a noise ensemble.
#[derive(Clone, Debug)]
pub struct Weights {
    spec: WeightSpec,
    /// clamp level for the Gaussian kind
    pub r: Option<f64>,
    /// `E[H Hᵀ] = (c_i/δt_i) I`
    pub c: Vec<f64>,
}

impl Weights {
    pub fn spec(&self) -> &WeightSpec {
        &self.spec
    }

    /// Weights of step `i` for all paths, `paths x d`.
    pub fn step(&self, noise: &NoiseEnsemble, i: usize) -> Array2<f64> {
        let dt = noise.partition().delta()[i];
        let inc = noise.increments().index_axis(Axis(1), i);
        match &self.spec {
            WeightSpec::ClampedGaussian { .. } => {
                let r = self.r.unwrap();
                inc.mapv(|w| clamped_weight(w, dt, r))
            }
            WeightSpec::RademacherNative => inc.mapv(|w| w / dt),
            WeightSpec::Custom { build, .. } => build(noise, i),
        }
    }

    /// Sample mean of each weight coordinate and its 95% half-width, per step.
    pub fn centering(&self, noise: &NoiseEnsemble) -> Vec<Vec<(f64, f64)>> {
        (0..noise.partition().steps())
            .map(|i| {
                let h = self.step(noise, i);
                h.axis_iter(Axis(1))
                    .map(|col| {
                        let ms = MeanSe::of(&col.to_vec());
                        (ms.mean, ms.ci())
                    })
                    .collect()
            })
            .collect()
    }
}

/// Resolves `spec` for `noise`, checking that the weight kind fits the noise.
pub fn resolve_weights(spec: &WeightSpec, noise: &NoiseEnsemble) -> Result<Weights> {
    let n = noise.partition().steps();
    match spec {
        WeightSpec::ClampedGaussian { r } => {
            if noise.mode() != NoiseMode::Gaussian {
                return Err(Error::validation("clamped Gaussian weights need Gaussian noise"));
            }
            let r = r.unwrap_or_else(|| default_clamp_level(n));
            if !(r > 0.0) {
                return Err(Error::validation(format!("clamp level must be positive, got {r}")));
            }
            Ok(Weights { spec: spec.clone(), r: Some(r), c: vec![clamped_second_moment(r); n] })
        }
        WeightSpec::RademacherNative => {
            if noise.mode() != NoiseMode::Rademacher {
                return Err(Error::validation("native weights need Rademacher noise"));
            }
            Ok(Weights { spec: spec.clone(), r: None, c: vec![1.0; n] })
        }
        WeightSpec::Custom { c, .. } => {
            if c.len() != n {
                return Err(Error::validation("custom weights need one scale per step"));
            }
            if let Some(bad) = c.iter().find(|v| !(**v > SCALE_RANGE.0 && **v < SCALE_RANGE.1)) {
                return Err(Error::validation(format!("weight scale {bad} outside {SCALE_RANGE:?}")));
            }
            Ok(Weights { spec: spec.clone(), r: None, c: c.clone() })
        }
    }
}

/// All weights, `paths x N x d`.
pub fn make_weights(spec: &WeightSpec, noise: &NoiseEnsemble) -> Result<(Array3<f64>, Weights)> {
    let w = resolve_weights(spec, noise)?;
    let (m, n, d) = noise.increments().dim();
    let mut out = Array3::zeros((m, n, d));
    for i in 0..n {
        out.index_axis_mut(Axis(1), i).assign(&w.step(noise, i));
    }
    Ok((out, w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BtzOptions {
    /// Record `Y` at every `stride`-th node and `Z` moments per block of
    /// `stride` steps.
    pub stride: usize,
    /// Project `(Y_{i+1} - Ê[Y_{i+1}]) H_i` instead of `Y_{i+1} H_i`. Equal in
    /// exact arithmetic since `E[H_i | F_i] = 0`, with far less variance.
    pub center_weighted: bool,
    /// Also project `ν_i` and `ν_i H_i` to check the centered rewrite.
    pub check_nu: bool,
}

impl Default for BtzOptions {
    fn default() -> Self {
        BtzOptions { stride: 1, center_weighted: true, check_nu: false }
    }
}

/// Step driver of the centered scheme: `(i, path, y, z) -> G_i`.
pub type StepDriver<'a> = dyn Fn(usize, usize, f64, &[f64]) -> f64 + Sync + 'a;

#[derive(Debug, Clone)]
pub struct BtzSolution {
    pub partition: Partition,
    pub stride: usize,
    pub lineage: Lineage,
    /// `paths x (N/stride + 1)`
    pub y: Array2<f64>,
    /// `Z_i` at the first step of each block, `paths x N/stride x d`
    pub z: Array3<f64>,
    /// `Σ δt_i Z_i` over each block
    pub z_sum: Array3<f64>,
    /// `Σ δt_i |Z_i|²` over each block
    pub z_sq: Array2<f64>,
    pub y0: MeanSe,
    pub z0: Vec<MeanSe>,
    /// `max_{i, path} |Y_i|`
    pub max_abs_y: f64,
    /// `max_path Ê[Σ_{j>=i} δt_j |Z_j|² | F_i]` for each `i < N`
    pub bmo: Vec<f64>,
    /// largest `|Ê[ν_i]|` and `|Ê[ν_i H_i]|` when requested
    pub nu_residual: Option<(f64, f64)>,
    /// estimator applications made by the scheme at each step
    pub scheme_calls: Vec<usize>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub weights: Weights,
    pub estimator: String,
}

impl BtzSolution {
    pub fn paths(&self) -> usize {
        self.y.nrows()
    }

    pub fn dims(&self) -> usize {
        self.z.len_of(Axis(2))
    }

    /// `Y` at recorded node `k` (grid node `k * stride`).
    pub fn y_at(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.y.column(k)
    }
}

fn regressors_at(forward: &EulerSolution, augment: Option<&Array2<f64>>, i: usize) -> Array2<f64> {
    let x = forward.values.index_axis(Axis(1), i);
    match augment {
        None => x.to_owned(),
        Some(a) => {
            let (m, d) = x.dim();
            let mut out = Array2::zeros((m, d + 1));
            out.slice_mut(ndarray::s![.., ..d]).assign(&x);
            out.column_mut(d).assign(&a.column(i));
            out
        }
    }
}

/// The backward scheme driven by `terminal` and the driver `g` (plain or
/// truncated) on the paths of `forward`.
pub fn run_btz(
    forward: &EulerSolution,
    terminal: &TerminalFunctional,
    g: &dyn Driver,
    est: &CondExpEstimator,
    weights: &WeightSpec,
    opts: &BtzOptions,
) -> Result<BtzSolution> {
    let p = forward.partition();
    let xi = terminal.eval_paths(p, &forward.values)?;
    let augment = terminal.running_statistics(p, &forward.values);
    let times = p.times().to_vec();
    let d = forward.dims();
    let step = |i: usize, m: usize, y: f64, z: &[f64]| {
        let row = forward.values.index_axis(Axis(0), m);
        let xr = row.row(i);
        if d == 1 {
            g.eval(times[i], &[xr[0]], y, z)
        } else {
            g.eval(times[i], &xr.to_vec(), y, z)
        }
    };
    run_centered(forward, &xi, augment.as_ref(), &step, est, weights, opts)
}

/// The centered scheme with general step drivers and weights.
pub fn run_centered(
    forward: &EulerSolution,
    xi: &[f64],
    augment: Option<&Array2<f64>>,
    driver: &StepDriver,
    est: &CondExpEstimator,
    weights: &WeightSpec,
    opts: &BtzOptions,
) -> Result<BtzSolution> {
    if matches!(est, CondExpEstimator::Nested { .. }) {
        return Err(Error::validation("the backward scheme needs a regression or tree backend"));
    }
    let noise = forward.noise.as_ref();
    let p = forward.partition().clone();
    let n = p.steps();
    let (m, d) = (forward.paths(), forward.dims());
    if xi.len() != m {
        return Err(Error::validation("terminal values do not match the path count"));
    }
    if opts.stride == 0 || n % opts.stride != 0 {
        return Err(Error::validation(format!("stride {} does not divide N = {n}", opts.stride)));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("non-finite terminal value at step {n}")));
    }
    let w = resolve_weights(weights, noise)?;
    let stride = opts.stride;
    let blocks = n / stride;
    let mut y_rec = Array2::<f64>::zeros((m, blocks + 1));
    let mut z_rec = Array3::<f64>::zeros((m, blocks, d));
    let mut z_sum = Array3::<f64>::zeros((m, blocks, d));
    let mut z_sq = Array2::<f64>::zeros((m, blocks));
    y_rec.column_mut(blocks).assign(&ndarray::Array1::from(xi.to_vec()));
    let mut y_next = xi.to_vec();
    let mut max_abs_y = xi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut bmo_tail = vec![0.0; m];
    let mut bmo = vec![0.0; n];
    let mut nu_res: Option<(f64, f64)> = opts.check_nu.then_some((0.0, 0.0));
    let mut calls = vec![0; n];
    let mut diagnostics = Vec::new();
    let mut y0 = MeanSe { mean: 0.0, se: 0.0, count: m };
    let mut z0 = vec![y0; d];

    for i in (0..n).rev() {
        let x = regressors_at(forward, augment, i);
        let reg = Regressors { values: x.view(), step: i, steps: n, layout: noise.layout(), mode: noise.mode() };
        let prepared = est.prepare(&reg)?;
        if let Some(diag) = prepared.diagnostics {
            diagnostics.push(diag);
        }
        let h = w.step(noise, i);
        let dt = p.delta()[i];

        let ey = prepared.apply(&y_next)?;
        let targets: Vec<f64> = if opts.center_weighted {
            y_next.iter().zip(&ey).map(|(a, b)| a - b).collect()
        } else {
            y_next.clone()
        };
        let z = weighted_apply(&prepared, &targets, h.view())?;
        calls[i] = prepared.applications();

        if i == 0 {
            y0 = MeanSe::of(&y_next);
            z0 = (0..d)
                .map(|k| {
                    let s: Vec<f64> = targets.iter().zip(h.column(k)).map(|(a, b)| a * b).collect();
                    MeanSe::of(&s)
                })
                .collect();
        }

        let y_cur: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|path| {
                let zr = z.row(path);
                let gv = if d == 1 { driver(i, path, ey[path], &[zr[0]]) } else { driver(i, path, ey[path], &zr.to_vec()) };
                ey[path] + gv * dt
            })
            .collect();
        if let Some(bad) = y_cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite Y at step {i} (path {bad})")));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite Z at step {i}")));
        }

        if let Some((r0, r1)) = nu_res.as_mut() {
            let c = w.c[i];
            let nu: Vec<f64> = (0..m)
                .map(|path| {
                    let zh: f64 = (0..d).map(|k| z[[path, k]] * h[[path, k]]).sum();
                    y_next[path] - ey[path] - dt / c * zh
                })
                .collect();
            let e0 = prepared.apply(&nu)?;
            let e1 = weighted_apply(&prepared, &nu, h.view())?;
            *r0 = e0.iter().fold(*r0, |a, v| a.max(v.abs()));
            *r1 = e1.iter().fold(*r1, |a, v| a.max(v.abs()));
        }

        // discrete BMO statistic: Ê_i[Σ_{j>=i} δt_j |Z_j|²]
        let zz: Vec<f64> = (0..m).map(|path| dt * z.row(path).dot(&z.row(path))).collect();
        let cond_tail = prepared.apply(&bmo_tail)?;
        bmo[i] = (0..m).map(|path| zz[path] + cond_tail[path]).fold(f64::NEG_INFINITY, f64::max);
        for path in 0..m {
            bmo_tail[path] += zz[path];
        }

        let b = i / stride;
        for path in 0..m {
            z_sq[[path, b]] += zz[path];
            for k in 0..d {
                z_sum[[path, b, k]] += dt * z[[path, k]];
            }
        }
        if i % stride == 0 {
            z_rec.index_axis_mut(Axis(1), b).assign(&z);
            y_rec.column_mut(b).assign(&ndarray::Array1::from(y_cur.clone()));
        }
        max_abs_y = y_cur.iter().fold(max_abs_y, |a, v| a.max(v.abs()));
        y_next = y_cur;
    }

    Ok(BtzSolution {
        partition: p,
        stride,
        lineage: noise.lineage(),
        y: y_rec,
        z: z_rec,
        z_sum,
        z_sq,
        y0,
        z0,
        max_abs_y,
        bmo,
        nu_residual: nu_res,
        scheme_calls: calls,
        diagnostics,
        weights: w,
        estimator: est.name().to_string(),
    })
}

/// Outcome of the uniform bound check on `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub bound: f64,
    pub max_abs_y: f64,
    /// `bound - max |Y|`; negative on violation
    pub margin: f64,
    pub pass: bool,
}

/// `max |Y_i| <= (‖ξ‖∞ + Λ₀ T) e^{1 + Λ_y T}`.
pub fn check_uniform_bound(sol: &BtzSolution, xi_bound: f64, lambda0: f64, lambda_y: f64) -> BoundCheck {
    let t = sol.partition.horizon();
    let bound = (xi_bound + lambda0 * t) * (1.0 + lambda_y * t).exp();
    let margin = bound - sol.max_abs_y;
    BoundCheck { bound, max_abs_y: sol.max_abs_y, margin, pass: sol.max_abs_y <= bound }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BmoReport {
    pub per_step: Vec<f64>,
    pub max: f64,
}

/// Per-step `max_path Ê[Σ_{j>=i} δt_j |Z_j|² | F_i]` and its max over `i`.
pub fn check_discrete_bmo(sol: &BtzSolution) -> BmoReport {
    let max = sol.bmo.iter().copied().fold(0.0f64, f64::max);
    BmoReport { per_step: sol.bmo.clone(), max }
}

/// Monte Carlo estimate of `E[Z_t]` from the Malliavin representation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalliavinEstimate {
    pub step: usize,
    pub z: Vec<MeanSe>,
}

/// `Z_t ≈ E[Φ N^t_{s*} + Σ_{j>=k} g(t_j, X_j, Y_j, Z_j) N^t_{min(t_{j+1}, s*)} δt_j]`
/// with `N^t_v = M_vᵀ (∇X_t)^{-1} / (v - t)`, `M_v = Σ_{t<=τ<v} ∇X_τᵀ ΔW_τ`,
/// `t = t_k` and `s*` the first monitoring date after `t`. `∇X` follows the
/// discrete variational recursion `∇X_{i+1} = (I + ∇b δt) ∇X_i`. The driver
/// term needs the scheme values `(Y, Z)` of a coupled solution recorded at
/// every step; pass `None` when `g ≡ 0`.
pub fn malliavin_z(
    forward: &EulerSolution,
    terminal: &TerminalFunctional,
    driver: Option<(&dyn Driver, &BtzSolution)>,
    k: usize,
) -> Result<MalliavinEstimate> {
    let drift = &forward.drift;
    if !drift.has_gradient() {
        return Err(Error::validation(format!(
            "drift '{}' has no gradient; the variational process is undefined",
            drift.name()
        )));
    }
    let p = forward.partition();
    let n = p.steps();
    if k >= n {
        return Err(Error::validation("Z is estimated strictly before the horizon"));
    }
    let (m, d) = (forward.paths(), forward.dims());
    let s_star = match terminal.kind() {
        crate::driver::TerminalKind::TerminalOnly(_) => n,
        crate::driver::TerminalKind::Discrete { times, .. } => {
            let mut next = None;
            for &s in times {
                let j = p.floor_index(s)? + usize::from(s >= p.times()[p.floor_index(s)? + 1]);
                if j > k {
                    next = Some(j);
                    break;
                }
            }
            next.ok_or_else(|| Error::validation("no monitoring date after t"))?
        }
        _ => return Err(Error::validation("Malliavin estimator needs a terminal-only or discrete functional")),
    };
    if let Some((_, sol)) = driver {
        if sol.stride != 1 || sol.lineage != forward.noise.lineage() || sol.paths() != m {
            return Err(Error::Uncoupled("scheme values must be coupled and recorded at every step".into()));
        }
    }
    let xi = terminal.eval_paths(p, &forward.values)?;
    let t = p.times()[k];
    let samples: Vec<Result<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|path| {
            let mut grad = DMatrix::<f64>::identity(d, d);
            let mut jac = vec![0.0; d * d];
            let mut mv = vec![0.0; d];
            let mut inv_t: Option<DMatrix<f64>> = None;
            let mut acc = vec![0.0; d];
            for i in 0..n {
                if i == k {
                    let inv = grad
                        .clone()
                        .try_inverse()
                        .filter(|inv| inv.iter().all(|v| v.is_finite()))
                        .ok_or_else(|| Error::numerical(format!("singular first variation at step {k}, path {path}")))?;
                    inv_t = Some(inv);
                }
                let xi_row = forward.values.index_axis(Axis(0), path);
                let x: Vec<f64> = xi_row.row(i).to_vec();
                if i >= k && i < s_star {
                    for a in 0..d {
                        let mut s = 0.0;
                        for b in 0..d {
                            s += grad[(b, a)] * forward.noise.dw(path, i, b);
                        }
                        mv[a] += s;
                    }
                }
                if i >= k {
                    if let Some((g, sol)) = driver {
                        let v = (i + 1).min(s_star);
                        let z: Vec<f64> = sol.z.index_axis(Axis(0), path).row(i).to_vec();
                        let gv = g.eval(p.times()[i], &x, sol.y[[path, i]], &z);
                        let nv = weight(&mv, inv_t.as_ref().unwrap(), p.times()[v] - t);
                        for a in 0..d {
                            acc[a] += gv * nv[a] * p.delta()[i];
                        }
                    }
                }
                drift.gradient(p.times()[i], &x, &mut jac)?;
                let step = DMatrix::from_row_slice(d, d, &jac) * p.delta()[i] + DMatrix::identity(d, d);
                grad = step * grad;
            }
            let nv = weight(&mv, inv_t.as_ref().unwrap(), p.times()[s_star] - t);
            for a in 0..d {
                acc[a] += xi[path] * nv[a];
            }
            Ok(acc)
        })
        .collect();
    let mut cols = vec![Vec::with_capacity(m); d];
    for s in samples {
        let s = s?;
        for a in 0..d {
            cols[a].push(s[a]);
        }
    }
    Ok(MalliavinEstimate { step: k, z: cols.iter().map(|c| MeanSe::of(c)).collect() })
}

/// `N = Mᵀ (∇X_t)^{-1} / span` as a row vector.
fn weight(mv: &[f64], inv: &DMatrix<f64>, span: f64) -> Vec<f64> {
    let d = mv.len();
    (0..d).map(|b| (0..d).map(|a| mv[a] * inv[(a, b)]).sum::<f64>() / span).collect()
}

/// Convenience view of `Y` at every node when recorded with stride 1.
pub fn full_y(sol: &BtzSolution) -> Option<ArrayView2<'_, f64>> {
    (sol.stride == 1).then(|| sol.y.view())
}
