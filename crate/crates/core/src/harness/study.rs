use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use ndarray::Axis;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{BackendName, Config, ReferencePolicy, Scheme};
use super::rate::{fit_rate, RateFit};
use crate::btz::{check_discrete_bmo, check_uniform_bound, run_btz, BoundCheck, BtzOptions, BtzSolution};
use crate::driver::{truncate_driver, Driver, DriverSpec, TerminalFunctional};
use crate::error::{Error, Result};
use crate::forward::{euler_maruyama, quadrature_sweep, strong_error_point, EulerSolution, ForwardSweep, QuadratureSweep};
use crate::grid::{refine_couple, sample_noise, NoiseEnsemble, Partition, RefinementMap};
use crate::oracle::{OracleSolution, QuadratureMethod};
use crate::stats::MeanSe;
use crate::zvonkin::{find_lambda, solve_mild, transform_drift, LambdaTrial, PdeGrid, ZvonkinSolution};

/// Errors below this are treated as exact zeros and left out of rate fits.
pub const EXACT_FLOOR: f64 = 1e-24;

/// What a BTZ run is compared with.
pub enum Reference<'a> {
    /// Coupled run on a refinement, recorded with `stride` equal to the
    /// refinement factor.
    Fine(&'a BtzSolution),
    /// Closed form evaluated along the forward paths of the run.
    Oracle { oracle: &'a OracleSolution, forward: &'a EulerSolution },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BtzError {
    /// `E[max_i |Y^ref_{t_i} - Y_i|²]`
    pub err_y: MeanSe,
    /// `E[Σ_i ∫_{t_i}^{t_{i+1}} |Z^ref_s - Z_i|² ds]`
    pub err_z: MeanSe,
}

/// Squared-error functionals of a BTZ solution recorded at every step.
pub fn btz_error(sol: &BtzSolution, reference: Reference) -> Result<BtzError> {
    if sol.stride != 1 {
        return Err(Error::validation("the measured solution must be recorded at every step"));
    }
    let p = &sol.partition;
    let n = p.steps();
    let (m, d) = (sol.paths(), sol.dims());
    let (ey, ez): (Vec<f64>, Vec<f64>) = match reference {
        Reference::Fine(fine) => {
            if fine.lineage != sol.lineage || fine.paths() != m || fine.dims() != d {
                return Err(Error::Uncoupled("reference was not driven by the same noise".into()));
            }
            let ft = fine.partition.times();
            let aligned = fine.y.ncols() == n + 1
                && (0..=n).all(|j| (ft[j * fine.stride] - p.times()[j]).abs() <= 1e-12 * p.horizon());
            if !aligned {
                return Err(Error::Uncoupled("reference grid does not refine the measured grid".into()));
            }
            (0..m)
                .into_par_iter()
                .map(|k| {
                    let ey = (0..=n).map(|j| (fine.y[[k, j]] - sol.y[[k, j]]).powi(2)).fold(0.0, f64::max);
                    let ez: f64 = (0..n)
                        .map(|j| {
                            let mut cross = 0.0;
                            let mut zz = 0.0;
                            for a in 0..d {
                                cross += sol.z[[k, j, a]] * fine.z_sum[[k, j, a]];
                                zz += sol.z[[k, j, a]] * sol.z[[k, j, a]];
                            }
                            (fine.z_sq[[k, j]] - 2.0 * cross + p.delta()[j] * zz).max(0.0)
                        })
                        .sum();
                    (ey, ez)
                })
                .unzip()
        }
        Reference::Oracle { oracle, forward } => {
            if forward.noise.lineage() != sol.lineage || forward.paths() != m || forward.partition() != p {
                return Err(Error::Uncoupled("forward paths do not belong to the solution".into()));
            }
            if d != 1 {
                return Err(Error::validation("oracles are one-dimensional"));
            }
            let tables = OracleTables::build(oracle, forward)?;
            (0..m)
                .into_par_iter()
                .map(|k| {
                    let mut ey = 0.0f64;
                    let mut ez = 0.0;
                    for i in 0..=n {
                        let (y, z) = if i == n { (tables.terminal[k], 0.0) } else { tables.eval(i, forward.x(k, i, 0)) };
                        ey = ey.max((y - sol.y[[k, i]]).powi(2));
                        if i < n {
                            ez += p.delta()[i] * (z - sol.z[[k, i, 0]]).powi(2);
                        }
                    }
                    (ey, ez)
                })
                .unzip()
        }
    };
    Ok(BtzError { err_y: MeanSe::of(&ey), err_z: MeanSe::of(&ez) })
}

/// Oracle `Y` and `Z` tabulated per time node over the visited range of
/// `X`; `Y` is interpolated by cubic Hermite with slopes `Z`.
struct OracleTables {
    lo: Vec<f64>,
    dx: Vec<f64>,
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    /// `Φ(X_T)` per path
    terminal: Vec<f64>,
}

const TABLE_SPACING: f64 = 0.01;

impl OracleTables {
    fn build(oracle: &OracleSolution, forward: &EulerSolution) -> Result<Self> {
        let p = forward.partition();
        let n = p.steps();
        let mut out = OracleTables { lo: vec![], dx: vec![], y: vec![], z: vec![], terminal: vec![] };
        for i in 0..n {
            let col = forward.values.index_axis(Axis(1), i);
            let col = col.column(0);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - TABLE_SPACING;
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + TABLE_SPACING;
            let k = (((hi - lo) / TABLE_SPACING).ceil() as usize).max(1);
            let dx = (hi - lo) / k as f64;
            let t = p.times()[i];
            let vals: Vec<Result<(f64, f64)>> = (0..=k)
                .into_par_iter()
                .map(|j| {
                    let x = lo + j as f64 * dx;
                    Ok((oracle.y(t, x)?, oracle.z(t, x)?))
                })
                .collect();
            let mut y = Vec::with_capacity(k + 1);
            let mut z = Vec::with_capacity(k + 1);
            for v in vals {
                let (a, b) = v?;
                y.push(a);
                z.push(b);
            }
            out.lo.push(lo);
            out.dx.push(dx);
            out.y.push(y);
            out.z.push(z);
        }
        out.terminal = (0..forward.paths())
            .map(|k| oracle.y(p.horizon(), forward.x(k, n, 0)))
            .collect::<Result<_>>()?;
        Ok(out)
    }

    fn eval(&self, i: usize, x: f64) -> (f64, f64) {
        let (y, z, dx) = (&self.y[i], &self.z[i], self.dx[i]);
        let s = ((x - self.lo[i]) / dx).clamp(0.0, (y.len() - 1) as f64);
        let j = (s.floor() as usize).min(y.len() - 2);
        let u = s - j as f64;
        let h00 = (1.0 + 2.0 * u) * (1.0 - u).powi(2);
        let h10 = u * (1.0 - u).powi(2);
        let h01 = u * u * (3.0 - 2.0 * u);
        let h11 = u * u * (u - 1.0);
        let yv = h00 * y[j] + h10 * dx * z[j] + h01 * y[j + 1] + h11 * dx * z[j + 1];
        (yv, (1.0 - u) * z[j] + u * z[j + 1])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Column {
    pub name: &'static str,
    pub fit: Option<RateFit>,
    /// rows excluded from the fit as exact zeros
    pub exact_rows: Vec<usize>,
}

/// Per-point facts of a BTZ sweep beyond the error rows.
#[derive(Debug, Clone, Serialize)]
pub struct BtzPoint {
    pub n: usize,
    pub y0: MeanSe,
    pub z0: Vec<MeanSe>,
    pub oracle_y0: Option<f64>,
    pub bmo_max: f64,
    pub bound: Option<BoundCheck>,
    pub truncation: Option<f64>,
    pub clamp_level: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZvonkinSummary {
    pub lambda: f64,
    pub residual: f64,
    pub sup_grad: f64,
    pub sup_u: f64,
    pub trials: Vec<LambdaTrial>,
    pub transform_lipschitz: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub config_hash: String,
    pub seed: u64,
    pub paths: usize,
    pub reference: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub scheme: Scheme,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
    /// fits of error columns against `N`
    pub fits: Vec<Column>,
    pub btz_points: Vec<BtzPoint>,
    pub zvonkin: Option<ZvonkinSummary>,
    pub metadata: Metadata,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl ConvergenceReport {
    pub fn fit(&self, column: &str) -> Option<RateFit> {
        self.fits.iter().find(|c| c.name == column).and_then(|c| c.fit)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

/// Writes rows as they complete. The first column is `N`.
struct CsvSink {
    out: Option<BufWriter<File>>,
}

impl CsvSink {
    fn open(dir: Option<&Path>, name: &str, header: &[&str]) -> Result<Self> {
        let out = match dir {
            None => None,
            Some(d) => {
                std::fs::create_dir_all(d)?;
                let mut w = BufWriter::new(File::create(d.join(name))?);
                writeln!(w, "{}", header.join(","))?;
                w.flush()?;
                Some(w)
            }
        };
        Ok(CsvSink { out })
    }

    fn row(&mut self, row: &[f64]) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            writeln!(w, "{}", format_row(row))?;
            w.flush()?;
        }
        Ok(())
    }
}

/// `N` as an integer, everything else with 12 significant digits.
pub fn format_row(row: &[f64]) -> String {
    let mut parts = vec![format!("{}", row[0] as u64)];
    parts.extend(row[1..].iter().map(|v| format!("{v:.11e}")));
    parts.join(",")
}

fn fit_column(rows: &[Vec<f64>], k: usize, name: &'static str) -> Column {
    let mut exact = Vec::new();
    let mut pts = Vec::new();
    for r in rows {
        if r[k].abs() < EXACT_FLOOR {
            exact.push(r[0] as usize);
        } else {
            pts.push((r[0] as usize, r[k]));
        }
    }
    if !exact.is_empty() {
        info!("{name}: rows {exact:?} are exact and excluded from the fit");
    }
    let fit = if pts.len() >= 2 { fit_rate(&pts).ok() } else { None };
    Column { name, fit, exact_rows: exact }
}

/// Runs the study described by `cfg`, writing `<scheme>.csv`, `report.json`
/// and `timing.json` under `out` when given.
pub fn run_study(cfg: &Config, out: Option<&Path>) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = match cfg.study.scheme {
        Scheme::Forward => forward_study(cfg, out)?,
        Scheme::Quadrature => quadrature_study(cfg, out)?,
        Scheme::Btz => btz_study(cfg, out)?,
        Scheme::Zvonkin => zvonkin_study(cfg, out)?,
    };
    report.wall_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::numerical(e.to_string()))?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        std::fs::write(dir.join("timing.json"), format!("{{\"wall_seconds\": {:.3}}}\n", report.wall_seconds))?;
    }
    Ok(report)
}

fn metadata(cfg: &Config, reference: &str) -> Metadata {
    Metadata {
        config_hash: cfg.hash(),
        seed: cfg.study.seed,
        paths: cfg.study.paths,
        reference: reference.to_string(),
    }
}

fn sweep_points<T, F>(cfg: &Config, f: F, mut done: impl FnMut(&T) -> Result<()>) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let wrap = |n: usize| f(n).map_err(|e| Error::SweepPoint { n, source: Box::new(e) });
    if cfg.study.parallel {
        let all: Vec<Result<T>> = cfg.study.n.par_iter().map(|&n| wrap(n)).collect();
        let mut out = Vec::new();
        for r in all {
            let v = r?;
            done(&v)?;
            out.push(v);
        }
        Ok(out)
    } else {
        let mut out = Vec::new();
        for &n in &cfg.study.n {
            info!("sweep point N={n}");
            let v = wrap(n)?;
            done(&v)?;
            out.push(v);
        }
        Ok(out)
    }
}

fn forward_study(cfg: &Config, out: Option<&Path>) -> Result<ConvergenceReport> {
    let drift = cfg.drift.build()?;
    let sweep = ForwardSweep {
        horizon: cfg.partition.horizon,
        x0: cfg.x0(),
        n_list: cfg.study.n.clone(),
        paths: cfg.study.paths,
        p: cfg.study.p,
        factor: cfg.study.reference_factor,
        mode: cfg.noise.mode,
        seed: cfg.study.seed,
        chunk: cfg.study.chunk,
    };
    let header = vec!["N", "h", "err_l2", "err_l2_ci", "err_lp", "err_lp_ci"];
    let mut sink = CsvSink::open(out, "forward.csv", &header)?;
    let rows = sweep_points(
        cfg,
        |n| {
            let e = strong_error_point(&drift, &sweep, n)?;
            Ok(vec![n as f64, cfg.partition.horizon / n as f64, e.l2, e.l2_ci, e.lp, e.lp_ci])
        },
        |r: &Vec<f64>| sink.row(r),
    )?;
    let fits = vec![fit_column(&rows, 2, "err_l2"), fit_column(&rows, 4, "err_lp")];
    let reference = format!("coupled {}x finer Euler run", cfg.study.reference_factor);
    Ok(ConvergenceReport {
        scheme: Scheme::Forward,
        header,
        rows,
        fits,
        btz_points: vec![],
        zvonkin: None,
        metadata: metadata(cfg, &reference),
        wall_seconds: 0.0,
    })
}

fn quadrature_study(cfg: &Config, out: Option<&Path>) -> Result<ConvergenceReport> {
    let drift = cfg.drift.build()?;
    let sweep = QuadratureSweep {
        n_list: cfg.study.n.clone(),
        paths: cfg.study.paths,
        p: cfg.study.p,
        factor: cfg.study.reference_factor.max(16),
        seed: cfg.study.seed,
        chunk: cfg.study.chunk,
    };
    let header = vec!["N", "h", "moment", "moment_ci"];
    let mut sink = CsvSink::open(out, "quadrature.csv", &header)?;
    let entries = quadrature_sweep(&drift, &sweep)?;
    let mut rows = Vec::new();
    for e in entries {
        let r = vec![e.n as f64, 1.0 / e.n as f64, e.moment, e.moment_ci];
        sink.row(&r)?;
        rows.push(r);
    }
    let fits = vec![fit_column(&rows, 2, "moment")];
    let reference = format!("shared fine grid {}x the largest N", sweep.factor);
    Ok(ConvergenceReport {
        scheme: Scheme::Quadrature,
        header,
        rows,
        fits,
        btz_points: vec![],
        zvonkin: None,
        metadata: metadata(cfg, &reference),
        wall_seconds: 0.0,
    })
}

/// Inputs shared by all points of a BTZ sweep.
pub struct BtzSetup {
    pub driver: DriverSpec,
    pub terminal: TerminalFunctional,
    pub truncation: Option<f64>,
    pub oracle: Option<OracleSolution>,
    pub use_oracle: bool,
}

impl BtzSetup {
    pub fn new(cfg: &Config) -> Result<Self> {
        let drift = cfg.drift.build()?;
        let driver = cfg.driver.build(cfg.noise.dims)?;
        let terminal = cfg.terminal.build()?;
        let truncation = cfg.driver.level(&driver, &terminal, cfg.partition.horizon);
        let oracle = if cfg.noise.dims == 1 {
            OracleSolution::new(&driver, &drift, &terminal, cfg.partition.horizon, cfg.drift.x0, QuadratureMethod::default())
                .ok()
        } else {
            None
        };
        let use_oracle = match cfg.study.reference {
            ReferencePolicy::Auto => oracle.is_some(),
            ReferencePolicy::Oracle if oracle.is_none() => {
                return Err(Error::Config("no closed-form oracle for this driver, drift and terminal".into()))
            }
            ReferencePolicy::Oracle => true,
            ReferencePolicy::Fine => false,
        };
        if !use_oracle && cfg.condexp.backend == BackendName::ExactTree {
            return Err(Error::Config("exact-tree runs can only be measured against an oracle".into()));
        }
        Ok(BtzSetup { driver, terminal, truncation, oracle, use_oracle })
    }

    pub fn solve(&self, cfg: &Config, forward: &EulerSolution, reference: bool, stride: usize) -> Result<BtzSolution> {
        let est = if reference { cfg.condexp.build_reference() } else { cfg.condexp.build() };
        let opts = BtzOptions { stride, ..Default::default() };
        let w = cfg.weights.build();
        match self.truncation {
            Some(level) => {
                let g = truncate_driver(self.driver.clone(), level)?;
                run_btz(forward, &self.terminal, &g as &dyn Driver, &est, &w, &opts)
            }
            None => run_btz(forward, &self.terminal, &self.driver as &dyn Driver, &est, &w, &opts),
        }
    }

    /// Noise of the measured run at `n` steps.
    pub fn noise(&self, cfg: &Config, n: usize) -> Result<NoiseEnsemble> {
        let p = Partition::uniform(cfg.partition.horizon, n)?;
        match cfg.condexp.backend {
            BackendName::ExactTree => NoiseEnsemble::tree(&p),
            BackendName::Lsmc => sample_noise(&p, cfg.study.paths, cfg.noise.dims, cfg.noise.mode, cfg.study.seed),
        }
    }
}

/// One BTZ sweep point: the run at `n` steps and its error against the
/// configured reference.
pub fn btz_point(cfg: &Config, setup: &BtzSetup, n: usize) -> Result<(BtzError, BtzPoint)> {
    let drift = cfg.drift.build()?;
    let x0 = cfg.x0();
    let (err, sol) = if setup.use_oracle {
        let forward = euler_maruyama(&x0, &drift, Arc::new(setup.noise(cfg, n)?))?;
        let sol = setup.solve(cfg, &forward, false, 1)?;
        let oracle = setup.oracle.as_ref().unwrap();
        (btz_error(&sol, Reference::Oracle { oracle, forward: &forward })?, sol)
    } else {
        let coarse_p = Partition::uniform(cfg.partition.horizon, n)?;
        let map = RefinementMap::uniform(&coarse_p, cfg.study.reference_factor)?;
        let fine_noise = sample_noise(map.fine(), cfg.study.paths, cfg.noise.dims, cfg.noise.mode, cfg.study.seed)?;
        let coarse_noise = refine_couple(&fine_noise, &map)?;
        let sol = {
            let forward = euler_maruyama(&x0, &drift, Arc::new(coarse_noise))?;
            setup.solve(cfg, &forward, false, 1)?
        };
        let fine = {
            let forward = euler_maruyama(&x0, &drift, Arc::new(fine_noise))?;
            setup.solve(cfg, &forward, true, cfg.study.reference_factor)?
        };
        (btz_error(&sol, Reference::Fine(&fine))?, sol)
    };
    let bound = setup.terminal.bound().is_finite().then(|| {
        let c = setup.driver.constants();
        check_uniform_bound(&sol, setup.terminal.bound(), c.lambda0, c.lambda_y)
    });
    let point = BtzPoint {
        n,
        y0: sol.y0,
        z0: sol.z0.clone(),
        oracle_y0: setup.oracle.as_ref().map(|o| o.y0),
        bmo_max: check_discrete_bmo(&sol).max,
        bound,
        truncation: setup.truncation,
        clamp_level: sol.weights.r,
    };
    if let Some(b) = &bound {
        if !b.pass {
            warn!("N={n}: uniform bound violated, max |Y| = {} > {}", b.max_abs_y, b.bound);
        }
    }
    Ok((err, point))
}

fn btz_study(cfg: &Config, out: Option<&Path>) -> Result<ConvergenceReport> {
    let setup = BtzSetup::new(cfg)?;
    let header = vec!["N", "h", "err_y", "err_y_ci", "err_z", "err_z_ci"];
    let mut sink = CsvSink::open(out, "btz.csv", &header)?;
    let points = sweep_points(
        cfg,
        |n| {
            let (e, point) = btz_point(cfg, &setup, n)?;
            let row = vec![n as f64, cfg.partition.horizon / n as f64, e.err_y.mean, e.err_y.ci(), e.err_z.mean, e.err_z.ci()];
            Ok((row, point))
        },
        |(r, _): &(Vec<f64>, BtzPoint)| sink.row(r),
    )?;
    let (rows, btz_points): (Vec<_>, Vec<_>) = points.into_iter().unzip();
    let fits = vec![fit_column(&rows, 2, "err_y"), fit_column(&rows, 4, "err_z")];
    let reference = if setup.use_oracle {
        "closed-form oracle".to_string()
    } else {
        format!(
            "coupled {}x finer run, basis richness x{}",
            cfg.study.reference_factor,
            cfg.condexp.reference_richness.max(1)
        )
    };
    Ok(ConvergenceReport {
        scheme: Scheme::Btz,
        header,
        rows,
        fits,
        btz_points,
        zvonkin: None,
        metadata: metadata(cfg, &reference),
        wall_seconds: 0.0,
    })
}

/// Solves the PDE of `cfg`, searching `λ` when it is not given.
pub fn zvonkin_solve(cfg: &Config) -> Result<(ZvonkinSolution, Vec<LambdaTrial>)> {
    let pde = &cfg.pde;
    let drift = cfg.drift.build()?;
    let lambda = pde.lambda.unwrap_or(1.0);
    let grid = PdeGrid::with_interior(drift, cfg.partition.horizon, pde.time_steps, pde.interior, pde.dx, lambda)?;
    match pde.lambda {
        Some(_) => {
            let sol = solve_mild(&grid, pde.tol, pde.max_iter)?;
            let g = sol.sup_grad();
            Ok((sol, vec![LambdaTrial { lambda, sup_grad: g, pass: g <= pde.target }]))
        }
        None => {
            let (_, sol, trials) = find_lambda(&grid, pde.target, pde.ceiling, pde.tol, pde.max_iter)?;
            Ok((sol, trials))
        }
    }
}

fn zvonkin_study(cfg: &Config, out: Option<&Path>) -> Result<ConvergenceReport> {
    let (sol, trials) = zvonkin_solve(cfg)?;
    let transform = if sol.sup_grad() <= 0.5 {
        transform_drift(&sol).ok().map(|t| (t.lipschitz_estimate, t.lipschitz_bound))
    } else {
        None
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("zvonkin.csv"))?);
        writeln!(w, "t,x,u,du")?;
        let x = sol.grid.nodes();
        for (k, t) in sol.grid.times().iter().enumerate() {
            for j in sol.grid.interior() {
                writeln!(w, "{t:.11e},{:.11e},{:.11e},{:.11e}", x[j], sol.u[[k, j]], sol.du[[k, j]])?;
            }
        }
        w.flush()?;
    }
    let summary = ZvonkinSummary {
        lambda: sol.grid.lambda,
        residual: sol.residual,
        sup_grad: sol.sup_grad(),
        sup_u: sol.sup_u(),
        trials,
        transform_lipschitz: transform,
    };
    Ok(ConvergenceReport {
        scheme: Scheme::Zvonkin,
        header: vec![],
        rows: vec![],
        fits: vec![],
        btz_points: vec![],
        zvonkin: Some(summary),
        metadata: metadata(cfg, "mild-equation residual"),
        wall_seconds: 0.0,
    })
}
