use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};

/// Least-squares line through `(ln N, ln err)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// standard error of the slope; zero with two points
    pub stderr: f64,
    pub points: usize,
}

impl RateFit {
    /// Order in the mesh size `h ∝ 1/N`.
    pub fn slope_h(&self) -> f64 {
        -self.slope
    }
}

/// Fits `ln err = intercept + slope ln N`. Rows with non-positive error are
/// dropped with a warning.
pub fn fit_rate(rows: &[(usize, f64)]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(n, e)| {
            let keep = *e > 0.0 && e.is_finite();
            if !keep {
                warn!("dropping row N={n} with error {e} from the rate fit");
            }
            keep
        })
        .map(|(n, e)| ((*n as f64).ln(), e.ln()))
        .collect();
    let k = pts.len();
    if k < 2 {
        return Err(Error::validation(format!("need two positive error rows to fit a rate, have {k}")));
    }
    let kf = k as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / kf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / kf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::validation("rate fit needs at least two distinct N"));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if k > 2 {
        let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (rss / (kf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit { slope, intercept, stderr, points: k })
}
