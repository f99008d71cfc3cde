//! Conditional-expectation backends: least-squares regression, nested Monte
//! Carlo and exact enumeration on the Rademacher tree.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NoiseLayout, NoiseMode};
use crate::stats::MeanSe;

const CHUNK: usize = 4096;
const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum BasisSpec {
    /// Probabilists' Hermite polynomials of total degree at most `degree` in
    /// the standardized regressors.
    Polynomial { degree: usize },
    /// Indicators of equal-width bins of the first regressor.
    Bins { count: usize },
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec::Polynomial { degree: 3 }
    }
}

impl BasisSpec {
    /// Same family with `factor` times the richness.
    pub fn richer(&self, factor: usize) -> BasisSpec {
        match *self {
            BasisSpec::Polynomial { degree } => BasisSpec::Polynomial { degree: degree * factor },
            BasisSpec::Bins { count } => BasisSpec::Bins { count: count * factor },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CondExpEstimator {
    Lsmc(BasisSpec),
    /// Inner resampling with `inner` draws per outer path. Only usable on
    /// function targets, see [`nested_condexp`].
    Nested { inner: usize, seed: u64 },
    ExactTree,
}

impl CondExpEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            CondExpEstimator::Lsmc(_) => "lsmc",
            CondExpEstimator::Nested { .. } => "nested",
            CondExpEstimator::ExactTree => "exact-tree",
        }
    }
}

/// Conditioning information at one time step.
#[derive(Debug, Clone, Copy)]
pub struct Regressors<'a> {
    /// `paths x r` regressor values (forward state, possibly augmented)
    pub values: ArrayView2<'a, f64>,
    pub step: usize,
    pub steps: usize,
    pub layout: NoiseLayout,
    pub mode: NoiseMode,
}

impl<'a> Regressors<'a> {
    pub fn paths(&self) -> usize {
        self.values.nrows()
    }
}

/// Per-step diagnostics of a regression fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub columns: usize,
    pub condition: f64,
    pub pseudo_inverse: bool,
}

enum Solver {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Pinv(DMatrix<f64>),
}

enum Prepared {
    Lsmc { design: Array2<f64>, solver: Solver },
    Tree { depth: usize, steps: usize },
}

/// An estimator fitted to the regressors of one step. Applying it to several
/// target vectors reuses the same projection.
pub struct PreparedStep {
    inner: Prepared,
    paths: usize,
    applied: AtomicUsize,
    pub diagnostics: Option<StepDiagnostics>,
}

impl CondExpEstimator {
    pub fn prepare(&self, reg: &Regressors) -> Result<PreparedStep> {
        let paths = reg.paths();
        if paths == 0 {
            return Err(Error::validation("no paths to condition on"));
        }
        match self {
            CondExpEstimator::Lsmc(basis) => {
                let design = build_design(basis, reg.values)?;
                let (solver, diag) = factor(&design, reg.step)?;
                Ok(PreparedStep {
                    inner: Prepared::Lsmc { design, solver },
                    paths,
                    applied: AtomicUsize::new(0),
                    diagnostics: Some(diag),
                })
            }
            CondExpEstimator::ExactTree => {
                if reg.layout != NoiseLayout::Tree || reg.mode != NoiseMode::Rademacher {
                    return Err(Error::validation("exact-tree backend needs the full Rademacher tree layout"));
                }
                if paths != 1usize << reg.steps || reg.step > reg.steps {
                    return Err(Error::validation("path count does not match a full tree"));
                }
                Ok(PreparedStep {
                    inner: Prepared::Tree { depth: reg.step, steps: reg.steps },
                    paths,
                    applied: AtomicUsize::new(0),
                    diagnostics: None,
                })
            }
            CondExpEstimator::Nested { .. } => {
                Err(Error::validation("nested backend works on function targets only; use nested_condexp"))
            }
        }
    }
}

impl PreparedStep {
    /// Number of target vectors projected so far.
    pub fn applications(&self) -> usize {
        self.applied.load(Ordering::Relaxed)
    }

    /// `Ê[V | F_i]` on every path.
    pub fn apply(&self, targets: &[f64]) -> Result<Vec<f64>> {
        if targets.len() != self.paths {
            return Err(Error::validation(format!("{} targets for {} paths", targets.len(), self.paths)));
        }
        self.applied.fetch_add(1, Ordering::Relaxed);
        match &self.inner {
            Prepared::Lsmc { design, solver } => {
                let rhs = design_t_times(design, targets);
                let beta = match solver {
                    Solver::Cholesky(c) => c.solve(&rhs),
                    Solver::Pinv(p) => p * &rhs,
                };
                let beta: Vec<f64> = beta.iter().copied().collect();
                Ok(design
                    .axis_iter(Axis(0))
                    .into_par_iter()
                    .map(|row| row.iter().zip(&beta).map(|(a, b)| a * b).sum())
                    .collect())
            }
            Prepared::Tree { depth, steps } => Ok(tree_average(targets, *depth, *steps)),
        }
    }
}

fn tree_average(targets: &[f64], depth: usize, steps: usize) -> Vec<f64> {
    let mut level = targets.to_vec();
    for _ in depth..steps {
        level = level.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    }
    let shift = steps - depth;
    (0..targets.len()).map(|m| level[m >> shift]).collect()
}

/// Probabilists' Hermite polynomials `He_0..He_degree` at `x`.
fn hermite(x: f64, degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if degree >= 1 {
        out.push(x);
    }
    for k in 1..degree {
        let next = x * out[k] - k as f64 * out[k - 1];
        out.push(next);
    }
}

fn multi_indices(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(vars: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == vars {
            out.push(cur.clone());
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(vars, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(vars, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|ix| ix.iter().sum::<usize>());
    out
}

fn build_design(basis: &BasisSpec, values: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (m, r) = values.dim();
    // standardize, dropping regressors that are constant on the sample
    let mut active = Vec::new();
    for k in 0..r {
        let col: Vec<f64> = values.column(k).to_vec();
        let ms = MeanSe::of(&col);
        let sd = ms.se * (m as f64).sqrt();
        if sd.is_finite() && sd > 1e-12 * (1.0 + ms.mean.abs()) {
            active.push((k, ms.mean, sd));
        }
    }
    match *basis {
        BasisSpec::Polynomial { degree } => {
            let idx = multi_indices(active.len(), degree);
            let mut design = Array2::<f64>::zeros((m, idx.len()));
            design.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(p, mut row)| {
                let mut he: Vec<Vec<f64>> = Vec::with_capacity(active.len());
                for &(k, mu, sd) in &active {
                    let mut h = Vec::new();
                    hermite((values[[p, k]] - mu) / sd, degree, &mut h);
                    he.push(h);
                }
                for (c, ix) in idx.iter().enumerate() {
                    row[c] = ix.iter().enumerate().map(|(v, &e)| he[v][e]).product();
                }
            });
            Ok(design)
        }
        BasisSpec::Bins { count } => {
            if count == 0 {
                return Err(Error::validation("bin count must be positive"));
            }
            let Some(&(k, _, _)) = active.first() else {
                return Ok(Array2::from_elem((m, 1), 1.0));
            };
            let col = values.column(k);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = (hi - lo) / count as f64;
            let bin = |v: f64| (((v - lo) / width) as usize).min(count - 1);
            let mut used = vec![false; count];
            for &v in col.iter() {
                used[bin(v)] = true;
            }
            let map: Vec<Option<usize>> = {
                let mut c = 0;
                used.iter()
                    .map(|&u| {
                        if u {
                            c += 1;
                            Some(c - 1)
                        } else {
                            None
                        }
                    })
                    .collect()
            };
            let cols = used.iter().filter(|u| **u).count();
            let mut design = Array2::<f64>::zeros((m, cols));
            for (p, &v) in col.iter().enumerate() {
                if let Some(c) = map[bin(v)] {
                    design[[p, c]] = 1.0;
                }
            }
            Ok(design)
        }
    }
}

/// `Φᵀ v` assembled chunk by chunk in index order.
fn design_t_times(design: &Array2<f64>, v: &[f64]) -> DVector<f64> {
    let cols = design.ncols();
    let partials: Vec<Vec<f64>> = design
        .axis_chunks_iter(Axis(0), CHUNK)
        .into_par_iter()
        .zip(v.par_chunks(CHUNK))
        .map(|(rows, vals)| {
            let mut acc = vec![0.0; cols];
            for (row, y) in rows.axis_iter(Axis(0)).zip(vals) {
                for c in 0..cols {
                    acc[c] += row[c] * y;
                }
            }
            acc
        })
        .collect();
    let mut out = DVector::zeros(cols);
    for p in partials {
        for c in 0..cols {
            out[c] += p[c];
        }
    }
    out
}

fn gram(design: &Array2<f64>) -> DMatrix<f64> {
    let cols = design.ncols();
    let partials: Vec<Vec<f64>> = design
        .axis_chunks_iter(Axis(0), CHUNK)
        .into_par_iter()
        .map(|rows| {
            let mut acc = vec![0.0; cols * cols];
            for row in rows.axis_iter(Axis(0)) {
                for a in 0..cols {
                    let ra = row[a];
                    for b in a..cols {
                        acc[a * cols + b] += ra * row[b];
                    }
                }
            }
            acc
        })
        .collect();
    let mut g = DMatrix::zeros(cols, cols);
    for p in partials {
        for a in 0..cols {
            for b in a..cols {
                g[(a, b)] += p[a * cols + b];
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

fn factor(design: &Array2<f64>, step: usize) -> Result<(Solver, StepDiagnostics)> {
    let g = gram(design);
    let cols = g.nrows();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("non-finite regression matrix at step {step}")));
    }
    let eig = g.clone().symmetric_eigenvalues();
    let max = eig.iter().copied().fold(0.0f64, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition < COND_LIMIT {
        if let Some(c) = g.clone().cholesky() {
            return Ok((Solver::Cholesky(c), StepDiagnostics { step, columns: cols, condition, pseudo_inverse: false }));
        }
    }
    log::warn!("step {step}: regression matrix ill-conditioned (cond {condition:.3e}), using pseudo-inverse");
    let svd = g.svd(true, true);
    let pinv = svd
        .pseudo_inverse(max * 1e-13)
        .map_err(|e| Error::numerical(format!("pseudo-inverse failed at step {step}: {e}")))?;
    Ok((Solver::Pinv(pinv), StepDiagnostics { step, columns: cols, condition, pseudo_inverse: true }))
}

/// `Ê[V_{i+1} | F_i]` on every path.
pub fn fit_condexp(est: &CondExpEstimator, reg: &Regressors, targets: &[f64]) -> Result<Vec<f64>> {
    est.prepare(reg)?.apply(targets)
}

/// `Ê[V_{i+1} H_i^k | F_i]` for every coordinate `k`; `weights` is `paths x d`.
pub fn weighted_condexp(
    est: &CondExpEstimator,
    reg: &Regressors,
    targets: &[f64],
    weights: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let prepared = est.prepare(reg)?;
    weighted_apply(&prepared, targets, weights)
}

/// Weighted projection through an already prepared step.
pub fn weighted_apply(prepared: &PreparedStep, targets: &[f64], weights: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (m, d) = weights.dim();
    if m != targets.len() {
        return Err(Error::validation("weights and targets have different path counts"));
    }
    let mut out = Array2::zeros((m, d));
    for k in 0..d {
        let v: Vec<f64> = targets.iter().zip(weights.column(k)).map(|(a, h)| a * h).collect();
        let z = prepared.apply(&v)?;
        out.column_mut(k).assign(&ndarray::Array1::from(z));
    }
    Ok(out)
}

/// Nested Monte Carlo: for each outer path `m`, averages `sample(m, rng)`
/// over `inner` draws from a stream keyed by `(seed, m)`. Returns per-path
/// means and standard errors.
pub fn nested_condexp<F>(est: &CondExpEstimator, paths: usize, sample: F) -> Result<Vec<MeanSe>>
where
    F: Fn(usize, &mut ChaCha8Rng) -> f64 + Sync,
{
    let CondExpEstimator::Nested { inner, seed } = *est else {
        return Err(Error::validation("nested_condexp needs the nested backend"));
    };
    if inner == 0 {
        return Err(Error::validation("nested backend needs at least one inner sample"));
    }
    Ok((0..paths)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            let v: Vec<f64> = (0..inner).map(|_| sample(m, &mut rng)).collect();
            MeanSe::of(&v)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample_noise, NoiseEnsemble, Partition};
    use crate::quadrature::{expect_normal, normal_cdf};
    use ndarray::Array2;
    use rand_core::RngCore;

    fn reg(values: &Array2<f64>) -> Regressors<'_> {
        Regressors { values: values.view(), step: 1, steps: 2, layout: NoiseLayout::Sampled, mode: NoiseMode::Gaussian }
    }

    #[test]
    fn lsmc_reproduces_targets_in_span() {
        let x = Array2::from_shape_fn((500, 1), |(i, _)| (i as f64 * 0.37).sin() * 3.0);
        let v: Vec<f64> = x.column(0).iter().map(|x| 2.0 * x + 1.0).collect();
        let fit = fit_condexp(&CondExpEstimator::Lsmc(BasisSpec::Polynomial { degree: 1 }), &reg(&x), &v).unwrap();
        for (a, b) in fit.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lsmc_constants_and_orthogonality() {
        let x = Array2::from_shape_fn((2000, 2), |(i, k)| ((i * (k + 3)) as f64 * 0.113).cos() + k as f64);
        let est = CondExpEstimator::Lsmc(BasisSpec::Polynomial { degree: 3 });
        let c = fit_condexp(&est, &reg(&x), &vec![4.25; 2000]).unwrap();
        assert!(c.iter().all(|v| (v - 4.25).abs() < 1e-12));
        let v: Vec<f64> = (0..2000).map(|i| ((i as f64) * 0.71).sin()).collect();
        let prepared = est.prepare(&reg(&x)).unwrap();
        let fit = prepared.apply(&v).unwrap();
        let Prepared::Lsmc { design, .. } = &prepared.inner else { unreachable!() };
        for col in design.axis_iter(Axis(1)) {
            let dot: f64 = col.iter().zip(v.iter().zip(&fit)).map(|(b, (v, f))| b * (v - f)).sum();
            assert!(dot.abs() < 1e-9, "{dot}");
        }
    }

    #[test]
    fn constant_regressor_fits_the_mean() {
        let x = Array2::from_elem((100, 1), 0.0);
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let est = CondExpEstimator::Lsmc(BasisSpec::Polynomial { degree: 3 });
        let prepared = est.prepare(&reg(&x)).unwrap();
        assert_eq!(prepared.diagnostics.unwrap().columns, 1);
        let fit = prepared.apply(&v).unwrap();
        assert!(fit.iter().all(|f| (f - 49.5).abs() < 1e-12));
    }

    #[test]
    fn rank_deficient_design_falls_back_to_pinv() {
        // two regressor columns that are identical up to scaling
        let x = Array2::from_shape_fn((300, 2), |(i, k)| (i as f64 * 0.1).sin() * (1.0 + k as f64));
        let est = CondExpEstimator::Lsmc(BasisSpec::Polynomial { degree: 1 });
        let p = est.prepare(&reg(&x)).unwrap();
        assert!(p.diagnostics.unwrap().pseudo_inverse);
        let v: Vec<f64> = x.column(0).iter().map(|x| 3.0 * x - 1.0).collect();
        let fit = p.apply(&v).unwrap();
        for (a, b) in fit.iter().zip(&v) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn bins_average_within_bins() {
        let x = Array2::from_shape_fn((8, 1), |(i, _)| if i < 4 { 0.0 } else { 1.0 });
        let v = vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 20.0, 20.0];
        let fit = fit_condexp(&CondExpEstimator::Lsmc(BasisSpec::Bins { count: 4 }), &reg(&x), &v).unwrap();
        assert!(fit[..4].iter().all(|f| (f - 2.5).abs() < 1e-12));
        assert!(fit[4..].iter().all(|f| (f - 15.0).abs() < 1e-12));
    }

    fn tree_reg(steps: usize, step: usize, x: &Array2<f64>) -> Regressors<'_> {
        Regressors { values: x.view(), step, steps, layout: NoiseLayout::Tree, mode: NoiseMode::Rademacher }
    }

    #[test]
    fn tree_two_point_average() {
        let x = Array2::zeros((2, 1));
        let fit = fit_condexp(&CondExpEstimator::ExactTree, &tree_reg(1, 0, &x), &[3.0, 7.0]).unwrap();
        assert_eq!(fit, vec![5.0, 5.0]);
    }

    #[test]
    fn tree_weighted_examples() {
        let p = Partition::uniform(1.0, 1).unwrap();
        let t = NoiseEnsemble::tree(&p).unwrap();
        let x = Array2::zeros((2, 1));
        let dw: Vec<f64> = (0..2).map(|m| t.dw(m, 0, 0)).collect();
        let h = Array2::from_shape_fn((2, 1), |(m, _)| dw[m] / 1.0);
        let z = weighted_condexp(&CondExpEstimator::ExactTree, &tree_reg(1, 0, &x), &dw, h.view()).unwrap();
        assert_eq!(z[[0, 0]], 1.0);
        let c = weighted_condexp(&CondExpEstimator::ExactTree, &tree_reg(1, 0, &x), &[2.0, 2.0], h.view()).unwrap();
        assert_eq!(c[[0, 0]], 0.0);
    }

    #[test]
    fn tree_tower_property_is_exact() {
        let steps = 6;
        let v: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64).sqrt() - 1.3).collect();
        let x = Array2::zeros((64, 1));
        for i in 0..steps {
            let inner = fit_condexp(&CondExpEstimator::ExactTree, &tree_reg(steps, i + 1, &x), &v).unwrap();
            let outer = fit_condexp(&CondExpEstimator::ExactTree, &tree_reg(steps, i, &x), &inner).unwrap();
            let direct = fit_condexp(&CondExpEstimator::ExactTree, &tree_reg(steps, i, &x), &v).unwrap();
            for (a, b) in outer.iter().zip(&direct) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn tree_rejects_sampled_layout() {
        let x = Array2::zeros((4, 1));
        let mut r = tree_reg(2, 0, &x);
        r.layout = NoiseLayout::Sampled;
        assert!(fit_condexp(&CondExpEstimator::ExactTree, &r, &[0.0; 4]).is_err());
    }

    #[test]
    fn nested_estimates_mean_within_clt_width() {
        let inner = 4000;
        let est = CondExpEstimator::Nested { inner, seed: 77 };
        // targets independent of the outer state: uniform on [0, 1], mean 1/2, sd 1/sqrt(12)
        let out = nested_condexp(&est, 20, |_, rng| (rng.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0).unwrap();
        let sigma = (1.0f64 / 12.0).sqrt();
        for ms in out {
            assert!((ms.mean - 0.5).abs() < 4.0 * sigma / (inner as f64).sqrt());
        }
        assert!(nested_condexp(&CondExpEstimator::Nested { inner: 0, seed: 1 }, 3, |_, _| 0.0).is_err());
        let x = Array2::zeros((3, 1));
        assert!(fit_condexp(&est, &reg(&x), &[0.0; 3]).is_err());
    }

    #[test]
    fn clamped_gaussian_weight_moment_matches_quadrature() {
        // E[ΔW clamp(ΔW/δt, ±R/√δt)] = E[G clamp(G, ±R)] for every δt
        let r = 2.0 * (64f64).ln().sqrt();
        let p = Partition::uniform(1.0, 64).unwrap();
        let dt = p.delta()[0];
        let m = 200_000;
        let noise = sample_noise(&Partition::uniform(dt, 1).unwrap(), m, 1, NoiseMode::Gaussian, 8).unwrap();
        let bound = r / dt.sqrt();
        let v: Vec<f64> = (0..m).map(|k| noise.dw(k, 0, 0)).collect();
        let h = Array2::from_shape_fn((m, 1), |(k, _)| (v[k] / dt).clamp(-bound, bound));
        let x = Array2::zeros((m, 1));
        let est = CondExpEstimator::Lsmc(BasisSpec::Polynomial { degree: 3 });
        let z = weighted_condexp(&est, &reg(&x), &v, h.view()).unwrap();
        let oracle = expect_normal(|g| g * g.clamp(-r, r), &[-r, r], 8, 20).unwrap();
        assert!((oracle - (2.0 * normal_cdf(r) - 1.0)).abs() < 1e-12);
        let samples: Vec<f64> = (0..m).map(|k| v[k] * h[[k, 0]]).collect();
        let ms = MeanSe::of(&samples);
        assert!((z[[0, 0]] - oracle).abs() < 4.0 * ms.se, "{} vs {}", z[[0, 0]], oracle);
    }

    #[test]
    fn linearity_for_lsmc_and_tree() {
        let x = Array2::from_shape_fn((64, 1), |(i, _)| (i as f64 * 0.3).sin());
        let u: Vec<f64> = (0..64).map(|i| (i as f64).cos()).collect();
        let w: Vec<f64> = (0..64).map(|i| (i as f64 * 0.5).sin()).collect();
        let comb: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        for (est, r) in [
            (CondExpEstimator::Lsmc(BasisSpec::default()), reg(&x)),
            (CondExpEstimator::ExactTree, tree_reg(6, 3, &x)),
        ] {
            let p = est.prepare(&r).unwrap();
            let (fu, fw, fc) = (p.apply(&u).unwrap(), p.apply(&w).unwrap(), p.apply(&comb).unwrap());
            for k in 0..64 {
                assert!((fc[k] - (2.0 * fu[k] - 3.0 * fw[k])).abs() < 1e-12);
            }
            assert_eq!(p.applications(), 3);
        }
    }
}
