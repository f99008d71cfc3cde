//! Gaussian quadrature rules and expectations of functions of a standard
//! normal variable.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes and weights of a quadrature rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix, weights
/// `mu0 * v_0²` from the first eigenvector components.
fn golub_welsch(n: usize, offdiag: impl Fn(usize) -> f64, mu0: f64) -> Rule {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = offdiag(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], mu0 * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Gauss-Hermite rule for the standard normal weight: `E[f(G)] ≈ Σ w_k f(x_k)`.
pub fn gauss_hermite_normal(n: usize) -> Result<Rule> {
    if n == 0 {
        return Err(Error::validation("quadrature order must be positive"));
    }
    Ok(golub_welsch(n, |k| (k as f64).sqrt(), 1.0))
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Result<Rule> {
    if n == 0 {
        return Err(Error::validation("quadrature order must be positive"));
    }
    Ok(golub_welsch(n, |k| k as f64 / ((4 * k * k - 1) as f64).sqrt(), 2.0))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `E[f(G)]` by composite Gauss-Legendre on `[-12, 12]`, split at the given
/// breakpoints (kinks of `f`). Far more accurate than Gauss-Hermite for
/// functions that are only piecewise smooth.
pub fn expect_normal<F: Fn(f64) -> f64>(f: F, breakpoints: &[f64], panels: usize, order: usize) -> Result<f64> {
    let rule = gauss_legendre(order)?;
    let (lo, hi) = (-12.0, 12.0);
    let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|b| *b > lo && *b < hi).collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let step = (w[1] - w[0]) / panels as f64;
        for p in 0..panels {
            let a = w[0] + p as f64 * step;
            let half = 0.5 * step;
            let mid = a + half;
            for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
                let s = mid + half * x;
                total += wt * half * f(s) * normal_pdf(s);
            }
        }
    }
    Ok(total)
}

/// `E[f(G)]` by Gauss-Hermite of order `n`.
pub fn expect_normal_gh<F: Fn(f64) -> f64>(f: F, n: usize) -> Result<f64> {
    let rule = gauss_hermite_normal(n)?;
    Ok(rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * f(*x)).sum())
}
