//! One-dimensional solver for the damped backward Kolmogorov equation
//!
//! ```text
//! ∂_t u + ½ u'' + b u' - λ u = -b,   u(T, ·) = 0
//! ```
//!
//! in mild form, and the change of variables `Ψ(t, x) = x + u(t, x)`.
//!
//! In time to maturity `τ = T - t` the solution satisfies
//! `v(τ) = S(δ) v(τ - δ) + ∫_0^δ S(δ - s) F(τ - δ + s) ds` with
//! `S(r) = e^{-λr} Γ(r) *` and `F = b (v' + 1)`. Each step replaces the
//! heat semigroup under the integral by the linear interpolant between
//! `Γ(δ) *` and the identity while integrating the damping exactly, and
//! resolves the implicit endpoint term by Picard iteration.

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::DriftSpec;
use crate::quadrature::normal_cdf;

/// Kernel truncation, in standard deviations.
const KERNEL_SIGMAS: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct PdeGrid {
    pub drift: DriftSpec,
    pub horizon: f64,
    pub time_steps: usize,
    /// the space grid is `[-L, L]`
    pub half_width: f64,
    pub dx: f64,
    pub lambda: f64,
}

impl PdeGrid {
    pub fn new(drift: DriftSpec, horizon: f64, time_steps: usize, half_width: f64, dx: f64, lambda: f64) -> Result<Self> {
        if !(horizon > 0.0) || time_steps == 0 {
            return Err(Error::validation("need a positive horizon and at least one time step"));
        }
        if !(dx > 0.0) || !(half_width > dx) {
            return Err(Error::validation(format!("bad space grid: L = {half_width}, dx = {dx}")));
        }
        if !(lambda >= 0.0) {
            return Err(Error::validation(format!("damping must be nonnegative, got {lambda}")));
        }
        if !drift.bound().is_finite() {
            return Err(Error::validation("the drift must be bounded"));
        }
        let g = PdeGrid { drift, horizon, time_steps, half_width, dx, lambda };
        if g.interior_half_width() < dx {
            return Err(Error::validation(format!(
                "L = {half_width} leaves no interior; need L > {}",
                g.margin() + dx
            )));
        }
        Ok(g)
    }

    /// Grid whose interior covers `[-interior, interior]`.
    pub fn with_interior(drift: DriftSpec, horizon: f64, time_steps: usize, interior: f64, dx: f64, lambda: f64) -> Result<Self> {
        let margin = KERNEL_SIGMAS * horizon.sqrt() + drift.bound() * horizon;
        let cells = ((interior + margin) / dx).ceil();
        PdeGrid::new(drift, horizon, time_steps, cells * dx, dx, lambda)
    }

    /// Distance from the boundary beyond which truncation does not reach.
    pub fn margin(&self) -> f64 {
        KERNEL_SIGMAS * self.horizon.sqrt() + self.drift.bound() * self.horizon
    }

    pub fn interior_half_width(&self) -> f64 {
        self.half_width - self.margin()
    }

    /// Heat-kernel mass beyond the margin over the whole horizon.
    pub fn boundary_mass(&self) -> f64 {
        2.0 * normal_cdf(-KERNEL_SIGMAS)
    }

    pub fn nodes(&self) -> Array1<f64> {
        let n = self.space_nodes();
        Array1::from_iter((0..n).map(|j| -self.half_width + j as f64 * self.dx))
    }

    pub fn space_nodes(&self) -> usize {
        (2.0 * self.half_width / self.dx).round() as usize + 1
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.horizon / self.time_steps as f64;
        (0..=self.time_steps).map(|k| k as f64 * dt).collect()
    }

    /// Indices of the interior nodes.
    pub fn interior(&self) -> std::ops::Range<usize> {
        let skip = ((self.margin() / self.dx).ceil() as usize).min(self.space_nodes() / 2);
        skip..self.space_nodes() - skip
    }
}

#[derive(Debug, Clone)]
pub struct ZvonkinSolution {
    pub grid: PdeGrid,
    /// `u(t_k, x_j)`, `(time_steps + 1) x nodes`, `t_0 = 0`
    pub u: Array2<f64>,
    pub du: Array2<f64>,
    /// sup-norm of the step-equation defect on interior nodes
    pub residual: f64,
    /// Picard iterations used per step, in solving order
    pub iterations: Vec<usize>,
}

impl ZvonkinSolution {
    /// `Ψ(t_k, x_j) = x_j + u(t_k, x_j)`.
    pub fn psi(&self) -> Array2<f64> {
        let x = self.grid.nodes();
        let mut psi = self.u.clone();
        for mut row in psi.rows_mut() {
            row += &x;
        }
        psi
    }

    /// `sup |u'|` over interior nodes and all times.
    pub fn sup_grad(&self) -> f64 {
        let r = self.grid.interior();
        self.du.rows().into_iter().flat_map(|row| row.slice(ndarray::s![r.clone()]).to_vec()).fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn sup_u(&self) -> f64 {
        let r = self.grid.interior();
        self.u.rows().into_iter().flat_map(|row| row.slice(ndarray::s![r.clone()]).to_vec()).fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Discrete heat kernel `Γ(r, j dx) dx`, truncated and renormalized to mass 1.
fn heat_kernel(r: f64, dx: f64) -> Vec<f64> {
    let sd = r.sqrt();
    let half = ((KERNEL_SIGMAS * sd / dx).ceil() as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * half)
        .map(|j| {
            let x = (j as f64 - half as f64) * dx;
            (-0.5 * x * x / r).exp()
        })
        .collect();
    let mass: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= mass);
    k
}

/// Convolution with edge replication outside the grid.
fn convolve(f: ArrayView1<f64>, kernel: &[f64]) -> Array1<f64> {
    let n = f.len() as isize;
    let half = (kernel.len() / 2) as isize;
    Array1::from_iter((0..n).map(|j| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, w)| w * f[(j + i as isize - half).clamp(0, n - 1) as usize])
            .sum::<f64>()
    }))
}

/// Centered differences, one-sided at the ends.
fn gradient(f: ArrayView1<f64>, dx: f64) -> Array1<f64> {
    let n = f.len();
    Array1::from_iter((0..n).map(|j| {
        if j == 0 {
            (f[1] - f[0]) / dx
        } else if j == n - 1 {
            (f[n - 1] - f[n - 2]) / dx
        } else {
            (f[j + 1] - f[j - 1]) / (2.0 * dx)
        }
    }))
}

/// `(w0, w1)` with `∫_0^δ e^{-λ(δ-s)} [(1 - s/δ) A + (s/δ) B] ds = w0 A + w1 B`.
fn step_weights(lambda: f64, delta: f64) -> (f64, f64) {
    let a = lambda * delta;
    if a < 1e-4 {
        return (delta * (0.5 - a / 3.0 + a * a / 8.0), delta * (0.5 - a / 6.0 + a * a / 24.0));
    }
    let total = -(-a).exp_m1() / lambda;
    let w1 = total - (1.0 - (-a).exp() * (1.0 + a)) / (lambda * lambda * delta);
    (total - w1, w1)
}

/// Solves the damped equation on `grid`. Each time step iterates until the
/// sup-distance of successive iterates is below `tol`.
pub fn solve_mild(grid: &PdeGrid, tol: f64, max_iter: usize) -> Result<ZvonkinSolution> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::validation("need tol > 0 and max_iter > 0"));
    }
    let n = grid.time_steps;
    let x = grid.nodes();
    let nx = x.len();
    let delta = grid.horizon / n as f64;
    let kernel = heat_kernel(delta, grid.dx);
    let decay = (-grid.lambda * delta).exp();
    let (w0, w1) = step_weights(grid.lambda, delta);
    let times = grid.times();
    let b_at = |t: f64| x.mapv(|v| grid.drift.scalar(t, v));
    let source = |b: &Array1<f64>, v: &Array1<f64>| {
        let dv = gradient(v.view(), grid.dx);
        b * &(dv + 1.0)
    };
    let interior = grid.interior();
    let sup_int = |a: &Array1<f64>| a.slice(ndarray::s![interior.clone()]).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut u = Array2::<f64>::zeros((n + 1, nx));
    let mut iterations = Vec::with_capacity(n);
    let mut residual = 0.0f64;
    // k indexes time to maturity; row n - k holds t = T - k δ
    for k in 0..n {
        let prev = u.row(n - k).to_owned();
        let b_prev = b_at(times[n - k]);
        let b_next = b_at(times[n - k - 1]);
        let base = convolve(prev.view(), &kernel) * decay + convolve(source(&b_prev, &prev).view(), &kernel) * w0;
        let mut v = prev.clone();
        let mut last = f64::INFINITY;
        let mut ratio = f64::NAN;
        let mut done = false;
        for it in 1..=max_iter {
            let next = &base + &(source(&b_next, &v) * w1);
            let diff = (&next - &v).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if last.is_finite() && last > 0.0 {
                ratio = diff / last;
            }
            last = diff;
            v = next;
            if !v.iter().all(|z| z.is_finite()) {
                return Err(Error::numerical(format!("non-finite iterate at time step {k}")));
            }
            if diff < tol {
                iterations.push(it);
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::numerical(format!(
                "Picard iteration did not converge at time step {k}: {max_iter} iterates, last change {last:.3e}, contraction estimate {ratio:.3}"
            )));
        }
        let defect = &v - &(&base + &(source(&b_next, &v) * w1));
        residual = residual.max(sup_int(&defect));
        u.row_mut(n - k - 1).assign(&v);
    }
    let mut du = Array2::<f64>::zeros((n + 1, nx));
    for (mut d, row) in du.rows_mut().into_iter().zip(u.rows()) {
        d.assign(&gradient(row, grid.dx));
    }
    Ok(ZvonkinSolution { grid: grid.clone(), u, du, residual, iterations })
}

/// One damping level tried by [`find_lambda`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaTrial {
    pub lambda: f64,
    pub sup_grad: f64,
    pub pass: bool,
}

/// Doubles `λ` from 1 until `sup |u'| <= target` on the interior.
pub fn find_lambda(
    template: &PdeGrid,
    target: f64,
    ceiling: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, ZvonkinSolution, Vec<LambdaTrial>)> {
    let mut lambda = 1.0;
    let mut trials = Vec::new();
    while lambda <= ceiling {
        let grid = PdeGrid { lambda, ..template.clone() };
        let sol = solve_mild(&grid, tol, max_iter)?;
        let g = sol.sup_grad();
        let pass = g <= target;
        trials.push(LambdaTrial { lambda, sup_grad: g, pass });
        if pass {
            return Ok((lambda, sol, trials));
        }
        lambda *= 2.0;
    }
    let seen: Vec<String> = trials.iter().map(|t| format!("λ={} sup|u'|={:.4}", t.lambda, t.sup_grad)).collect();
    Err(Error::numerical(format!("no λ <= {ceiling} reaches sup|u'| <= {target}: {}", seen.join(", "))))
}

/// `b̃(t, x̃) = λ u(t, Ψ⁻¹(t, x̃))` and `σ̃ = 1 + u'(t, Ψ⁻¹(t, x̃))` on the
/// interior nodes.
#[derive(Debug, Clone, Serialize)]
pub struct TransformTable {
    pub times: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub b_tilde: Vec<Vec<f64>>,
    pub sigma_tilde: Vec<Vec<f64>>,
    /// largest difference quotient of `b̃` in `x̃`
    pub lipschitz_estimate: f64,
    /// `2 λ sup |u'|`
    pub lipschitz_bound: f64,
}

fn interp(x0: f64, dx: f64, f: ArrayView1<f64>, x: f64) -> f64 {
    let s = ((x - x0) / dx).clamp(0.0, (f.len() - 1) as f64);
    let j = (s.floor() as usize).min(f.len() - 2);
    let w = s - j as f64;
    (1.0 - w) * f[j] + w * f[j + 1]
}

pub fn transform_drift(sol: &ZvonkinSolution) -> Result<TransformTable> {
    let g = &sol.grid;
    let sup = sol.du.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if sup > 0.5 {
        return Err(Error::validation(format!("Ψ is not safely invertible: sup|u'| = {sup:.4} > 1/2")));
    }
    let x = g.nodes();
    let x0 = x[0];
    let psi = sol.psi();
    let inner = g.interior();
    let x_tilde: Vec<f64> = x.slice(ndarray::s![inner.clone()]).to_vec();
    let mut b_tilde = Vec::with_capacity(g.time_steps + 1);
    let mut sigma_tilde = Vec::with_capacity(g.time_steps + 1);
    let mut lip = 0.0f64;
    for k in 0..=g.time_steps {
        let prow = psi.row(k);
        let inv = |y: f64| {
            // Ψ(t, ·) is increasing; bisect on its linear interpolant
            let (mut lo, mut hi) = (x0, -x0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if interp(x0, g.dx, prow, mid) < y {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-14 {
                    break;
                }
            }
            0.5 * (lo + hi)
        };
        let pre: Vec<f64> = x_tilde.iter().map(|&y| inv(y)).collect();
        let bt: Vec<f64> = pre.iter().map(|&p| g.lambda * interp(x0, g.dx, sol.u.row(k), p)).collect();
        let st: Vec<f64> = pre.iter().map(|&p| 1.0 + interp(x0, g.dx, sol.du.row(k), p)).collect();
        for j in 1..bt.len() {
            lip = lip.max((bt[j] - bt[j - 1]).abs() / (x_tilde[j] - x_tilde[j - 1]));
        }
        b_tilde.push(bt);
        sigma_tilde.push(st);
    }
    Ok(TransformTable {
        times: g.times(),
        x_tilde,
        b_tilde,
        sigma_tilde,
        lipschitz_estimate: lip,
        lipschitz_bound: 2.0 * g.lambda * sol.sup_grad(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_weights_integrate_the_damping_exactly() {
        for (lambda, delta) in [(0.0, 0.1), (1e-6, 0.01), (3.0, 0.01), (64.0, 0.05)] {
            let (w0, w1) = step_weights(lambda, delta);
            let exact = if lambda == 0.0 { delta } else { -(-lambda * delta).exp_m1() / lambda };
            assert!((w0 + w1 - exact).abs() < 1e-15, "{lambda} {delta}");
            assert!(w0 <= w1 + 1e-18);
        }
    }

    #[test]
    fn kernel_has_unit_mass_and_preserves_constants() {
        let k = heat_kernel(0.01, 0.02);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let f = Array1::from_elem(50, 2.5);
        assert!(convolve(f.view(), &k).iter().all(|v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn zero_drift_gives_zero_solution() {
        let g = PdeGrid::with_interior(DriftSpec::zero(), 1.0, 20, 1.0, 0.1, 1.0).unwrap();
        let s = solve_mild(&g, 1e-12, 50).unwrap();
        assert!(s.u.iter().all(|v| *v == 0.0));
        assert_eq!(s.psi().row(3), g.nodes());
    }

    #[test]
    fn constant_drift_closed_form() {
        let (c, lambda) = (0.7, 2.0);
        let g = PdeGrid::with_interior(DriftSpec::constant(c), 1.0, 50, 1.0, 0.1, lambda).unwrap();
        let s = solve_mild(&g, 1e-13, 50).unwrap();
        for (k, t) in g.times().iter().enumerate() {
            let exact = c / lambda * (1.0 - (-lambda * (1.0 - t)).exp());
            assert!(s.u.row(k).iter().all(|v| (v - exact).abs() < 1e-12));
        }
        assert!(s.sup_grad() < 1e-12);
    }

    #[test]
    fn grid_rejects_missing_interior() {
        assert!(PdeGrid::new(DriftSpec::sine(), 1.0, 10, 5.0, 0.1, 1.0).is_err());
        assert!(PdeGrid::new(DriftSpec::sine(), 1.0, 10, 20.0, 0.1, -1.0).is_err());
    }

    #[test]
    fn sine_drift_lambda_search_and_transform() {
        let g = PdeGrid::with_interior(DriftSpec::sine(), 1.0, 200, 4.0, 0.02, 1.0).unwrap();
        let (lambda, sol, trials) = find_lambda(&g, 0.5, 1024.0, 1e-12, 200).unwrap();
        assert!(sol.residual < 1e-6);
        assert!(trials.windows(2).all(|w| w[1].sup_grad < w[0].sup_grad));
        assert_eq!(trials.last().unwrap().lambda, lambda);
        let damp = (1.0 + sol.sup_grad()) * (1.0 - (-lambda).exp()) / lambda;
        assert!(sol.sup_u() <= damp);
        assert!(sol.sup_grad() <= 0.5);
        let tab = transform_drift(&sol).unwrap();
        assert!(tab.sigma_tilde.iter().flatten().all(|s| (0.5..=1.5).contains(s)));
        assert!(tab.lipschitz_estimate <= tab.lipschitz_bound);
    }
}
