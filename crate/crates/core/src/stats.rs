//! Order-fixed reductions.
//!
//! Every Monte Carlo average in the crate goes through these helpers so that
//! results do not depend on the number of rayon workers: values are summed in
//! fixed-size chunks (in parallel) and the chunk partials are then combined
//! sequentially in index order.

use rayon::prelude::*;
use serde::Serialize;

const CHUNK: usize = 4096;

/// Normal quantile used for reported confidence half-widths (95%).
pub const Z95: f64 = 1.959_963_984_540_054;

pub fn sum(values: &[f64]) -> f64 {
    values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values) / values.len() as f64
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        let m = mean(values);
        if count < 2 {
            return MeanSe { mean: m, se: 0.0, count };
        }
        let ss: f64 = values
            .par_chunks(CHUNK)
            .map(|c| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        let var = ss / (count - 1) as f64;
        MeanSe { mean: m, se: (var / count as f64).sqrt(), count }
    }

    /// 95% confidence half-width.
    pub fn ci(&self) -> f64 {
        Z95 * self.se
    }
}

/// Neumaier compensated sum, used where the partition telescoping matters.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}
