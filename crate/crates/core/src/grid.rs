//! Time partitions, Brownian noise ensembles and grid refinement.
//!
//! Noise is generated by a counter-based stream: the increment of path `m`
//! at step `i` is a pure function of `(seed, m, i)`. Each path owns a ChaCha
//! stream and every step consumes a fixed number of words, so any entry can
//! be regenerated on its own and the output does not depend on how the
//! paths are split across workers.

use std::hash::{Hash, Hasher};

use ndarray::{Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::compensated_sum;

/// Time grid `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    times: Vec<f64>,
    delta: Vec<f64>,
    h: f64,
}

impl Partition {
    /// Uniform grid with `steps` intervals on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::validation(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::validation("partition needs at least one step"));
        }
        let mut times: Vec<f64> = (0..=steps).map(|i| i as f64 * horizon / steps as f64).collect();
        times[steps] = horizon;
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::validation("partition needs at least two time points"));
        }
        if times[0] != 0.0 {
            return Err(Error::validation("partition must start at 0"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::validation("partition times must be finite"));
        }
        let delta: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if delta.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::validation("partition times must be strictly increasing"));
        }
        let h = delta.iter().cloned().fold(0.0, f64::max);
        Ok(Partition { times, delta, h })
    }

    pub fn steps(&self) -> usize {
        self.delta.len()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// Mesh size `max δt_i`.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Sum of the steps, compensated.
    pub fn total_length(&self) -> f64 {
        compensated_sum(self.delta.iter().copied())
    }

    /// Largest `i` with `t_i <= s`. Intervals are right-open and the last
    /// one is closed, so `s = T` maps to `N - 1`.
    pub fn floor_index(&self, s: f64) -> Result<usize> {
        let t_end = self.horizon();
        if !(0.0..=t_end).contains(&s) {
            return Err(Error::validation(format!("time {s} outside [0, {t_end}]")));
        }
        let after = self.times.partition_point(|&t| t <= s);
        Ok((after - 1).min(self.steps() - 1))
    }

    /// Stable identity of the grid, used to check noise lineage.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for t in &self.times {
            t.to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }
}

/// Maps each coarse interval onto the fine intervals it contains.
#[derive(Debug, Clone)]
pub struct RefinementMap {
    fine: Partition,
    coarse: Partition,
    // fine index of each coarse node
    nodes: Vec<usize>,
}

impl RefinementMap {
    pub fn new(fine: Partition, coarse: Partition) -> Result<Self> {
        let tol = 1e-12 * fine.horizon();
        if (fine.horizon() - coarse.horizon()).abs() > tol {
            return Err(Error::validation("fine and coarse grids have different horizons"));
        }
        let mut nodes = Vec::with_capacity(coarse.times.len());
        let mut k = 0usize;
        for &tc in &coarse.times {
            while k < fine.times.len() && fine.times[k] < tc - tol {
                k += 1;
            }
            if k == fine.times.len() || (fine.times[k] - tc).abs() > tol {
                return Err(Error::validation(format!("coarse time {tc} is not a fine grid point")));
            }
            nodes.push(k);
        }
        Ok(RefinementMap { fine, coarse, nodes })
    }

    /// Uniform refinement of `coarse` by an integer `factor`.
    pub fn uniform(coarse: &Partition, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::validation("refinement factor must be positive"));
        }
        let fine = Partition::uniform(coarse.horizon(), coarse.steps() * factor)?;
        Self::new(fine, coarse.clone())
    }

    pub fn fine(&self) -> &Partition {
        &self.fine
    }

    pub fn coarse(&self) -> &Partition {
        &self.coarse
    }

    /// Fine index of coarse node `j`.
    pub fn fine_node(&self, j: usize) -> usize {
        self.nodes[j]
    }

    /// Fine interval range covered by coarse interval `j`.
    pub fn fine_range(&self, j: usize) -> std::ops::Range<usize> {
        self.nodes[j]..self.nodes[j + 1]
    }

    /// Constant fine-per-coarse ratio when the refinement is uniform.
    pub fn uniform_factor(&self) -> Option<usize> {
        let r = self.nodes[1] - self.nodes[0];
        self.nodes.windows(2).all(|w| w[1] - w[0] == r).then_some(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Gaussian,
    Rademacher,
}

/// How the paths of an ensemble were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLayout {
    /// Independent draws from the counter-based stream.
    Sampled,
    /// Full enumeration of the 2^N Rademacher paths; path `m` takes the
    /// negative increment at step `i` iff bit `N - 1 - i` of `m` is set.
    Tree,
}

/// Where the noise came from, so coupled pairs can be recognised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lineage {
    pub seed: u64,
    pub path_offset: u64,
    /// Fingerprint of the grid the increments were originally drawn on.
    pub root: u64,
}

/// Brownian (or Rademacher) increments, `paths x steps x dims`.
#[derive(Debug, Clone)]
pub struct NoiseEnsemble {
    partition: Partition,
    mode: NoiseMode,
    layout: NoiseLayout,
    lineage: Lineage,
    increments: Array3<f64>,
}

const TREE_MAX_STEPS: usize = 20;

impl NoiseEnsemble {
    /// Enumerates every Rademacher path on the partition (d = 1).
    pub fn tree(partition: &Partition) -> Result<Self> {
        let n = partition.steps();
        if n > TREE_MAX_STEPS {
            return Err(Error::validation(format!("tree enumeration limited to {TREE_MAX_STEPS} steps, got {n}")));
        }
        let paths = 1usize << n;
        let mut increments = Array3::<f64>::zeros((paths, n, 1));
        let roots: Vec<f64> = partition.delta().iter().map(|d| d.sqrt()).collect();
        for ((m, i, _), v) in increments.indexed_iter_mut() {
            let negative = (m >> (n - 1 - i)) & 1 == 1;
            *v = if negative { -roots[i] } else { roots[i] };
        }
        Ok(NoiseEnsemble {
            partition: partition.clone(),
            mode: NoiseMode::Rademacher,
            layout: NoiseLayout::Tree,
            lineage: Lineage { seed: 0, path_offset: 0, root: partition.fingerprint() },
            increments,
        })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn layout(&self) -> NoiseLayout {
        self.layout
    }

    pub fn lineage(&self) -> Lineage {
        self.lineage
    }

    pub fn seed(&self) -> u64 {
        self.lineage.seed
    }

    pub fn paths(&self) -> usize {
        self.increments.len_of(Axis(0))
    }

    pub fn dims(&self) -> usize {
        self.increments.len_of(Axis(2))
    }

    pub fn increments(&self) -> &Array3<f64> {
        &self.increments
    }

    /// Increment of path `m` at step `i`, coordinate `k`.
    pub fn dw(&self, m: usize, i: usize, k: usize) -> f64 {
        self.increments[[m, i, k]]
    }

    /// Brownian value `W_{t_i}` of path `m`, obtained by summing increments.
    pub fn path_value(&self, m: usize, i: usize, k: usize) -> f64 {
        (0..i).map(|j| self.increments[[m, j, k]]).sum()
    }

    /// True when `self` and `other` carry the same paths drawn from the same
    /// underlying fine noise.
    pub fn is_coupled_with(&self, other: &NoiseEnsemble) -> bool {
        self.lineage == other.lineage
            && self.mode == other.mode
            && self.layout == other.layout
            && self.paths() == other.paths()
            && self.dims() == other.dims()
    }
}

/// Number of 32-bit words a step consumes for `dims` coordinates; Gaussian
/// pairs use Box-Muller on two 64-bit uniforms.
fn words_per_step(dims: usize) -> u128 {
    4 * dims.div_ceil(2) as u128
}

fn path_stream(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

fn uniform_open(bits: u64) -> f64 {
    // (0, 1]
    ((bits >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
}

fn fill_step(rng: &mut ChaCha8Rng, mode: NoiseMode, dt: f64, out: &mut [f64]) {
    let sd = dt.sqrt();
    let dims = out.len();
    for pair in 0..dims.div_ceil(2) {
        let a = rng.next_u64();
        let b = rng.next_u64();
        match mode {
            NoiseMode::Gaussian => {
                let r = (-2.0 * uniform_open(a).ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * uniform_open(b);
                out[2 * pair] = sd * r * theta.cos();
                if 2 * pair + 1 < dims {
                    out[2 * pair + 1] = sd * r * theta.sin();
                }
            }
            NoiseMode::Rademacher => {
                out[2 * pair] = if a >> 63 == 1 { -sd } else { sd };
                if 2 * pair + 1 < dims {
                    out[2 * pair + 1] = if b >> 63 == 1 { -sd } else { sd };
                }
            }
        }
    }
}

/// Regenerates the increment vector of one `(path, step)` pair directly.
pub fn increment_at(seed: u64, path: u64, step: usize, partition: &Partition, dims: usize, mode: NoiseMode) -> Vec<f64> {
    let mut rng = path_stream(seed, path);
    rng.set_word_pos(step as u128 * words_per_step(dims));
    let mut out = vec![0.0; dims];
    fill_step(&mut rng, mode, partition.delta()[step], &mut out);
    out
}

/// Draws `paths` noise paths with global indices starting at 0.
pub fn sample_noise(partition: &Partition, paths: usize, dims: usize, mode: NoiseMode, seed: u64) -> Result<NoiseEnsemble> {
    sample_noise_range(partition, 0, paths, dims, mode, seed)
}

/// Draws the paths `offset .. offset + paths`. Splitting an ensemble into
/// ranges reproduces exactly the same increments.
pub fn sample_noise_range(
    partition: &Partition,
    offset: u64,
    paths: usize,
    dims: usize,
    mode: NoiseMode,
    seed: u64,
) -> Result<NoiseEnsemble> {
    if paths == 0 {
        return Err(Error::validation("need at least one path"));
    }
    if dims == 0 {
        return Err(Error::validation("need at least one dimension"));
    }
    let n = partition.steps();
    let mut increments = Array3::<f64>::zeros((paths, n, dims));
    let delta = partition.delta();
    increments
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(m, mut path)| {
            let mut rng = path_stream(seed, offset + m as u64);
            let mut buf = vec![0.0; dims];
            for i in 0..n {
                fill_step(&mut rng, mode, delta[i], &mut buf);
                for k in 0..dims {
                    path[[i, k]] = buf[k];
                }
            }
        });
    Ok(NoiseEnsemble {
        partition: partition.clone(),
        mode,
        layout: NoiseLayout::Sampled,
        lineage: Lineage { seed, path_offset: offset, root: partition.fingerprint() },
        increments,
    })
}

/// Aggregates fine increments onto the coarse grid of `map`. Coarse
/// increments are exact sums of the fine increments they cover.
pub fn refine_couple(fine: &NoiseEnsemble, map: &RefinementMap) -> Result<NoiseEnsemble> {
    if fine.partition != *map.fine() {
        return Err(Error::validation("noise is not defined on the fine grid of the refinement map"));
    }
    let (paths, _, dims) = fine.increments.dim();
    let nc = map.coarse().steps();
    let mut increments = Array3::<f64>::zeros((paths, nc, dims));
    increments
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(fine.increments.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut coarse_path, fine_path)| {
            for j in 0..nc {
                for k in 0..dims {
                    let mut s = 0.0;
                    for i in map.fine_range(j) {
                        s += fine_path[[i, k]];
                    }
                    coarse_path[[j, k]] = s;
                }
            }
        });
    let layout = match (fine.layout, map.uniform_factor()) {
        (NoiseLayout::Tree, Some(1)) => NoiseLayout::Tree,
        _ => NoiseLayout::Sampled,
    };
    Ok(NoiseEnsemble {
        partition: map.coarse().clone(),
        mode: fine.mode,
        layout,
        lineage: fine.lineage,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_partition_values() {
        let p = Partition::uniform(1.0, 4).unwrap();
        assert_eq!(p.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let p = Partition::uniform(1.0, 1).unwrap();
        assert_eq!(p.times(), &[0.0, 1.0]);
        assert_eq!(p.h(), 1.0);
        let p = Partition::uniform(2.0, 8).unwrap();
        assert!(p.delta().iter().all(|&d| d == 0.25));
    }

    #[test]
    fn uniform_partition_rejects_bad_input() {
        assert!(Partition::uniform(1.0, 0).is_err());
        assert!(Partition::uniform(0.0, 3).is_err());
        assert!(Partition::uniform(-1.0, 3).is_err());
        assert!(Partition::from_times(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn telescoping_sum_matches_horizon() {
        for &(t, n) in &[(1.0, 3), (0.7, 1000), (3.3, 77_777)] {
            let p = Partition::uniform(t, n).unwrap();
            assert!((p.total_length() - t).abs() <= 4.0 * f64::EPSILON * t);
        }
    }

    #[test]
    fn floor_index_convention() {
        let p = Partition::uniform(1.0, 4).unwrap();
        assert_eq!(p.floor_index(0.3).unwrap(), 1);
        assert_eq!(p.floor_index(0.0).unwrap(), 0);
        assert_eq!(p.floor_index(0.25).unwrap(), 1);
        assert_eq!(p.floor_index(1.0).unwrap(), 3);
        assert!(p.floor_index(1.0001).is_err());
        assert!(p.floor_index(-0.1).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_range_split_invariant() {
        let p = Partition::uniform(1.0, 16).unwrap();
        let a = sample_noise(&p, 64, 3, NoiseMode::Gaussian, 7).unwrap();
        let b = sample_noise(&p, 64, 3, NoiseMode::Gaussian, 7).unwrap();
        assert_eq!(a.increments(), b.increments());
        let tail = sample_noise_range(&p, 40, 24, 3, NoiseMode::Gaussian, 7).unwrap();
        for m in 0..24 {
            for i in 0..16 {
                for k in 0..3 {
                    assert_eq!(tail.dw(m, i, k).to_bits(), a.dw(40 + m, i, k).to_bits());
                }
            }
        }
        let direct = increment_at(7, 41, 9, &p, 3, NoiseMode::Gaussian);
        for k in 0..3 {
            assert_eq!(direct[k].to_bits(), a.dw(41, 9, k).to_bits());
        }
    }

    #[test]
    fn noise_is_independent_of_worker_count() {
        let p = Partition::uniform(1.0, 32).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let eight = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = one.install(|| sample_noise(&p, 500, 2, NoiseMode::Gaussian, 3).unwrap());
        let b = eight.install(|| sample_noise(&p, 500, 2, NoiseMode::Gaussian, 3).unwrap());
        assert_eq!(a.increments(), b.increments());
    }

    #[test]
    fn rademacher_entries_and_exact_variance() {
        let p = Partition::uniform(1.0, 4).unwrap();
        let e = sample_noise(&p, 200, 2, NoiseMode::Rademacher, 11).unwrap();
        assert!(e.increments().iter().all(|&v| v == 0.5 || v == -0.5));
        // two-point law: each value has probability 1/2, so the variance is exact
        for &dt in p.delta() {
            let s = dt.sqrt();
            let var = 0.5 * s * s + 0.5 * (-s) * (-s);
            assert_eq!(var, dt);
        }
        let mut plus = 0;
        for v in e.increments().iter() {
            if *v > 0.0 {
                plus += 1;
            }
        }
        let frac = plus as f64 / e.increments().len() as f64;
        assert!((frac - 0.5).abs() < 0.05);
    }

    #[test]
    fn gaussian_moments() {
        let p = Partition::uniform(1.0, 1).unwrap();
        let m = 100_000;
        let e = sample_noise(&p, m, 1, NoiseMode::Gaussian, 2024).unwrap();
        let v: Vec<f64> = e.increments().iter().copied().collect();
        let mean = v.iter().sum::<f64>() / m as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
        assert!(mean.abs() < 4.0 / (m as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn refine_couple_sums_fine_increments() {
        let fine_p = Partition::uniform(1.0, 2).unwrap();
        let coarse_p = Partition::uniform(1.0, 1).unwrap();
        let map = RefinementMap::new(fine_p.clone(), coarse_p).unwrap();
        let mut fine = sample_noise(&fine_p, 1, 1, NoiseMode::Gaussian, 1).unwrap();
        fine.increments[[0, 0, 0]] = 0.1;
        fine.increments[[0, 1, 0]] = -0.2;
        let coarse = refine_couple(&fine, &map).unwrap();
        assert!((coarse.dw(0, 0, 0) - (-0.1)).abs() < 1e-15);
        assert!(coarse.is_coupled_with(&fine));
    }

    #[test]
    fn refine_by_one_is_identity() {
        let p = Partition::uniform(1.0, 8).unwrap();
        let map = RefinementMap::uniform(&p, 1).unwrap();
        let fine = sample_noise(&p, 10, 2, NoiseMode::Gaussian, 5).unwrap();
        let coarse = refine_couple(&fine, &map).unwrap();
        assert_eq!(coarse.increments(), fine.increments());
    }

    #[test]
    fn refine_preserves_endpoints() {
        let coarse_p = Partition::uniform(1.0, 8).unwrap();
        let map = RefinementMap::uniform(&coarse_p, 16).unwrap();
        let fine = sample_noise(map.fine(), 20, 1, NoiseMode::Gaussian, 9).unwrap();
        let coarse = refine_couple(&fine, &map).unwrap();
        for m in 0..20 {
            for j in 0..=8 {
                // coarse partial sums are sums of the same fine values in the same order
                let wc = coarse.path_value(m, j, 0);
                let wf = fine.path_value(m, map.fine_node(j), 0);
                assert!((wc - wf).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn refine_rejects_grid_mismatch() {
        let coarse_p = Partition::uniform(1.0, 4).unwrap();
        let map = RefinementMap::uniform(&coarse_p, 2).unwrap();
        let wrong = sample_noise(&Partition::uniform(1.0, 4).unwrap(), 3, 1, NoiseMode::Gaussian, 1).unwrap();
        assert!(refine_couple(&wrong, &map).is_err());
        assert!(RefinementMap::new(Partition::uniform(1.0, 3).unwrap(), coarse_p).is_err());
    }

    #[test]
    fn tree_layout_enumerates_all_sign_patterns() {
        let p = Partition::uniform(1.0, 3).unwrap();
        let t = NoiseEnsemble::tree(&p).unwrap();
        assert_eq!(t.paths(), 8);
        let s: Vec<f64> = p.delta().iter().map(|d| d.sqrt()).collect();
        assert_eq!(t.dw(0, 0, 0), s[0]);
        assert_eq!(t.dw(7, 2, 0), -s[2]);
        assert_eq!(t.dw(4, 0, 0), -s[0]);
        assert_eq!(t.dw(4, 1, 0), s[1]);
    }
}
