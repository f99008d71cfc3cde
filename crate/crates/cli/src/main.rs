use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::error;

use qfbsde::btz::{check_discrete_bmo, check_uniform_bound, BtzSolution};
use qfbsde::forward::{euler_maruyama, EulerSolution};
use qfbsde::harness::study::BtzSetup;
use qfbsde::harness::{run_study, Config, ConvergenceReport, Scheme};
use qfbsde::Error;

#[derive(Parser)]
#[command(name = "qfbsde", version, about = "Convergence studies for forward-backward SDE schemes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML study configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides study.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// output directory for CSV and JSON artifacts
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Expect {
    /// exit with code 3 unless the fitted order in h lies in LO:HI
    #[arg(long, value_name = "LO:HI")]
    expect_order: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Strong error of Euler-Maruyama against a coupled finer run
    ForwardConverge(Expect),
    /// Moments of the drift quadrature error
    Quadrature(Expect),
    /// Solve the damped Kolmogorov equation and report the transform
    Zvonkin,
    /// A single backward run
    BtzRun {
        /// number of steps (default: first entry of study.n)
        #[arg(long)]
        steps: Option<usize>,
        /// dump Y and Z of the first paths to btz_paths.csv
        #[arg(long, default_value_t = 0)]
        dump_paths: usize,
    },
    /// Error sweep of the backward scheme
    BtzConverge(Expect),
    /// Y0 of the backward scheme against the closed-form oracle
    CompareOracle {
        /// allowed |Y0 - oracle| on top of three confidence half-widths
        #[arg(long, default_value_t = 5e-3)]
        tolerance: f64,
    },
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("could not size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load(global: &Global, scheme: Scheme) -> Result<Config, Error> {
    let mut cfg = match &global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.study.scheme = scheme;
    if let Some(s) = global.seed {
        cfg.study.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let out = g.out.as_deref();
    match &cli.command {
        Command::ForwardConverge(expect) => {
            let report = run_study(&load(g, Scheme::Forward)?, out)?;
            print_report(&report);
            check_order(&report, "err_l2", expect)
        }
        Command::Quadrature(expect) => {
            let report = run_study(&load(g, Scheme::Quadrature)?, out)?;
            print_report(&report);
            check_order(&report, "moment", expect)
        }
        Command::BtzConverge(expect) => {
            let report = run_study(&load(g, Scheme::Btz)?, out)?;
            print_report(&report);
            for p in &report.btz_points {
                println!("N={:<6} Y0={:.6} ± {:.2e}  BMO max={:.4}", p.n, p.y0.mean, p.y0.ci(), p.bmo_max);
            }
            check_order(&report, "err_y", expect)
        }
        Command::Zvonkin => {
            let cfg = load(g, Scheme::Zvonkin)?;
            let report = run_study(&cfg, out)?;
            let z = report.zvonkin.as_ref().expect("zvonkin summary");
            for t in &z.trials {
                println!("lambda={:<8} sup|u'|={:.6} {}", t.lambda, t.sup_grad, if t.pass { "pass" } else { "" });
            }
            println!("lambda={} residual={:.3e} sup|u|={:.6}", z.lambda, z.residual, z.sup_u);
            if let Some((est, bound)) = z.transform_lipschitz {
                println!("transformed drift: Lipschitz estimate {est:.4} <= bound {bound:.4}");
            }
            Ok(())
        }
        Command::BtzRun { steps, dump_paths } => {
            let cfg = load(g, Scheme::Btz)?;
            let n = steps.unwrap_or(cfg.study.n[0]);
            let setup = BtzSetup::new(&cfg)?;
            let (sol, forward) = single_run(&cfg, &setup, n)?;
            println!("estimator={} weights={} paths={} N={n}", sol.estimator, sol.weights.spec().name(), sol.paths());
            println!("Y0 = {:.8} ± {:.2e}", sol.y0.mean, sol.y0.ci());
            for (k, z) in sol.z0.iter().enumerate() {
                println!("Z0[{k}] = {:.8} ± {:.2e}", z.mean, z.ci());
            }
            if let Some(level) = setup.truncation {
                println!("truncation level n = {level:.4}");
            }
            if setup.terminal.bound().is_finite() {
                let c = setup.driver.constants();
                let b = check_uniform_bound(&sol, setup.terminal.bound(), c.lambda0, c.lambda_y);
                println!("max|Y| = {:.6}, bound = {:.6}, margin = {:.6}", b.max_abs_y, b.bound, b.margin);
            }
            println!("discrete BMO max = {:.6}", check_discrete_bmo(&sol).max);
            if let Some(o) = &setup.oracle {
                println!("oracle Y0 = {:.8}", o.y0);
            }
            if *dump_paths > 0 {
                let dir = out.unwrap_or(Path::new("."));
                dump(&sol, &forward.values, *dump_paths, dir)?;
            }
            Ok(())
        }
        Command::CompareOracle { tolerance } => {
            let cfg = load(g, Scheme::Btz)?;
            let setup = BtzSetup::new(&cfg)?;
            let Some(oracle) = &setup.oracle else {
                return Err(Error::Config("no closed-form oracle for this configuration".into()).into());
            };
            println!("oracle Y0 = {:.10}", oracle.y0);
            let mut worst: Option<String> = None;
            for &n in &cfg.study.n {
                let sol = single_run(&cfg, &setup, n).map_err(|e| Error::SweepPoint { n, source: Box::new(e) })?.0;
                let diff = (sol.y0.mean - oracle.y0).abs();
                let allowed = tolerance + 3.0 * sol.y0.ci();
                println!("N={n:<6} Y0={:.8} |diff|={diff:.3e} allowed={allowed:.3e}", sol.y0.mean);
                if diff > allowed {
                    worst = Some(format!("N={n}: |Y0 - oracle| = {diff:.3e} > {allowed:.3e}"));
                }
            }
            match worst {
                Some(msg) => Err(Failure::Check(msg)),
                None => Ok(()),
            }
        }
    }
}

fn single_run(cfg: &Config, setup: &BtzSetup, n: usize) -> Result<(BtzSolution, EulerSolution), Error> {
    let drift = cfg.drift.build()?;
    let forward = euler_maruyama(&cfg.x0(), &drift, Arc::new(setup.noise(cfg, n)?))?;
    let sol = setup.solve(cfg, &forward, false, 1)?;
    Ok((sol, forward))
}

fn print_report(r: &ConvergenceReport) {
    println!("{}", r.header.join(","));
    for row in &r.rows {
        println!("{}", qfbsde::harness::study::format_row(row));
    }
    for c in &r.fits {
        match c.fit {
            Some(f) => println!(
                "{}: slope vs N {:.4} ± {:.4} (order in h {:.4})",
                c.name,
                f.slope,
                f.stderr,
                f.slope_h()
            ),
            None => println!("{}: no fit (exact rows {:?})", c.name, c.exact_rows),
        }
    }
    println!("config {} seed {} reference: {}", &r.metadata.config_hash[..12], r.metadata.seed, r.metadata.reference);
}

fn check_order(r: &ConvergenceReport, column: &str, expect: &Expect) -> Result<(), Failure> {
    let Some(spec) = &expect.expect_order else { return Ok(()) };
    let parsed = spec.split_once(':').and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)));
    let Some((lo, hi)) = parsed else {
        return Err(Error::Config(format!("--expect-order wants LO:HI, got '{spec}'")).into());
    };
    let Some(fit) = r.fit(column) else {
        return Err(Failure::Check(format!("no rate fitted for {column}")));
    };
    let order = fit.slope_h();
    if order < lo || order > hi {
        return Err(Failure::Check(format!("order {order:.4} of {column} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn dump(sol: &BtzSolution, x: &ndarray::Array3<f64>, paths: usize, dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("btz_paths.csv"))?);
    writeln!(w, "path,i,t,x,y,z")?;
    let n = sol.partition.steps();
    for m in 0..paths.min(sol.paths()) {
        for i in 0..=n {
            let z = if i < n { sol.z[[m, i, 0]] } else { 0.0 };
            writeln!(
                w,
                "{m},{i},{:.11e},{:.11e},{:.11e},{:.11e}",
                sol.partition.times()[i],
                x[[m, i, 0]],
                sol.y[[m, i]],
                z
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
