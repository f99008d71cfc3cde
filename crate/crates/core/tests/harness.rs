use proptest::prelude::*;

use qfbsde::harness::{fit_rate, run_study, Config, Scheme};

fn small_forward() -> Config {
    Config::from_toml(
        r#"
[study]
scheme = "forward"
n = [4, 8, 16]
paths = 500
reference_factor = 4
chunk = 128

[drift]
kind = "clamped-holder"
alpha = 0.5
"#,
    )
    .unwrap()
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(Config::from_toml("[study]\nsceme = \"btz\"\n").is_err());
    assert!(Config::from_toml("[bogus]\nx = 1\n").is_err());
    assert!(Config::from_toml("[driver]\nkind = \"cubic\"\n").is_err());
}

#[test]
fn invalid_sweeps_are_rejected() {
    let bad = |s: &str| Config::from_toml(s).and_then(|c| c.validate()).is_err();
    assert!(bad("[study]\nn = [8]\n"));
    assert!(bad("[study]\nn = [16, 8]\n"));
    assert!(bad("[study]\npaths = 1\n"));
    assert!(bad("[study]\nreference_factor = 1\n"));
    assert!(!bad("[study]\nscheme = \"zvonkin\"\nn = [8]\n"));
}

#[test]
fn hash_follows_content_not_formatting() {
    let a = Config::from_toml("[study]\nseed = 3\npaths = 100\n").unwrap();
    let b = Config::from_toml("[study]\npaths   = 100\nseed = 3 # same\n").unwrap();
    let c = Config::from_toml("[study]\nseed = 4\npaths = 100\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    let back = Config::from_toml(&a.canonical()).unwrap();
    assert_eq!(back.hash(), a.hash());
}

#[test]
fn forward_study_writes_reproducible_artifacts() {
    let cfg = small_forward();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = run_study(&cfg, Some(d1.path())).unwrap();
    let r2 = run_study(&cfg, Some(d2.path())).unwrap();
    assert_eq!(r1.scheme, Scheme::Forward);
    assert_eq!(r1.rows, r2.rows);
    assert_eq!(r1.rows.len(), 3);
    for f in ["forward.csv", "report.json"] {
        let a = std::fs::read(d1.path().join(f)).unwrap();
        let b = std::fs::read(d2.path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
    assert!(d1.path().join("timing.json").exists());
    let csv = std::fs::read_to_string(d1.path().join("forward.csv")).unwrap();
    assert!(csv.starts_with("N,h,err_l2,err_l2_ci,err_lp,err_lp_ci\n4,"));
    let fit = r1.fit("err_l2").unwrap();
    assert!(fit.slope_h() > 0.2);
}

#[test]
fn tree_study_is_exact_for_the_zero_driver() {
    let cfg = Config::from_toml(include_str!("../../../configs/oracle_tree.toml")).unwrap();
    let r = run_study(&cfg, None).unwrap();
    for v in r.column("err_y").unwrap() {
        assert!(v < 1e-24, "{v}");
    }
    let col = r.fits.iter().find(|c| c.name == "err_y").unwrap();
    assert!(col.fit.is_none());
    assert_eq!(col.exact_rows.len(), 2);
}

#[test]
fn zvonkin_study_reports_the_damping() {
    let mut cfg = Config::from_toml(include_str!("../../../configs/a8_zvonkin.toml")).unwrap();
    cfg.pde.time_steps = 50;
    cfg.pde.dx = 0.05;
    let r = run_study(&cfg, None).unwrap();
    let z = r.zvonkin.unwrap();
    assert!(z.sup_grad <= 0.5);
    assert!(z.residual < 1e-10);
    let (est, bound) = z.transform_lipschitz.unwrap();
    assert!(est <= bound);
}

#[test]
fn fit_needs_two_positive_rows() {
    assert!(fit_rate(&[(8, 1.0)]).is_err());
    assert!(fit_rate(&[(8, 1.0), (16, 0.0)]).is_err());
    let f = fit_rate(&[(8, 1.0), (16, 0.0), (32, 0.25)]).unwrap();
    assert_eq!(f.points, 2);
    assert!((f.slope + 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn fit_recovers_exact_power_laws(order in -3.0f64..3.0, scale in 1e-6f64..1e3, k in 2usize..8) {
        let rows: Vec<(usize, f64)> = (0..k).map(|j| {
            let n = 4usize << j;
            (n, scale * (n as f64).powf(order))
        }).collect();
        let f = fit_rate(&rows).unwrap();
        prop_assert!((f.slope - order).abs() < 1e-10);
        prop_assert!((f.intercept - scale.ln()).abs() < 1e-8);
        prop_assert!(f.stderr < 1e-9);
    }
}
