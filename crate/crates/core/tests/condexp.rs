use ndarray::{Array2, Axis};
use proptest::prelude::*;

use qfbsde::condexp::{fit_condexp, nested_condexp, weighted_condexp, BasisSpec, CondExpEstimator, Regressors};
use qfbsde::grid::{sample_noise, NoiseEnsemble, NoiseLayout, NoiseMode, Partition};
use rand::Rng;

fn gaussian_regressors(m: usize, seed: u64) -> Array2<f64> {
    let p = Partition::uniform(1.0, 1).unwrap();
    let e = sample_noise(&p, m, 1, NoiseMode::Gaussian, seed).unwrap();
    e.increments().index_axis(Axis(1), 0).to_owned()
}

fn reg(values: &Array2<f64>, step: usize, steps: usize, layout: NoiseLayout, mode: NoiseMode) -> Regressors<'_> {
    Regressors { values: values.view(), step, steps, layout, mode }
}

#[test]
fn lsmc_reproduces_functions_in_the_span() {
    let x = gaussian_regressors(500, 2);
    let r = reg(&x, 1, 2, NoiseLayout::Sampled, NoiseMode::Gaussian);
    let targets: Vec<f64> = x.column(0).iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
    let fit = fit_condexp(&CondExpEstimator::Lsmc(BasisSpec::Polynomial { degree: 3 }), &r, &targets).unwrap();
    for (a, b) in fit.iter().zip(&targets) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn bins_average_within_each_bin() {
    let x = Array2::from_shape_vec((4, 1), vec![0.0, 0.1, 0.9, 1.0]).unwrap();
    let r = reg(&x, 1, 2, NoiseLayout::Sampled, NoiseMode::Gaussian);
    let fit = fit_condexp(&CondExpEstimator::Lsmc(BasisSpec::Bins { count: 2 }), &r, &[1.0, 3.0, 5.0, 9.0]).unwrap();
    for (a, b) in fit.iter().zip([2.0, 2.0, 7.0, 7.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn tree_average_is_the_exact_conditional_expectation() {
    let p = Partition::uniform(1.0, 3).unwrap();
    let t = NoiseEnsemble::tree(&p).unwrap();
    let x = Array2::<f64>::zeros((8, 1));
    let targets: Vec<f64> = (0..8).map(|m| t.path_value(m, 3, 0).powi(2)).collect();
    for depth in 0..=3 {
        let r = reg(&x, depth, 3, NoiseLayout::Tree, NoiseMode::Rademacher);
        let fit = fit_condexp(&CondExpEstimator::ExactTree, &r, &targets).unwrap();
        for m in 0..8 {
            // E[W_T² | F_t] = W_t² + (T - t)
            let expect = t.path_value(m, depth, 0).powi(2) + (3 - depth) as f64 / 3.0;
            assert!((fit[m] - expect).abs() < 1e-14, "depth {depth} path {m}");
        }
    }
}

#[test]
fn tree_backend_needs_tree_noise() {
    let x = Array2::<f64>::zeros((8, 1));
    let r = reg(&x, 1, 3, NoiseLayout::Sampled, NoiseMode::Rademacher);
    assert!(fit_condexp(&CondExpEstimator::ExactTree, &r, &[0.0; 8]).is_err());
    let r = reg(&x, 1, 4, NoiseLayout::Tree, NoiseMode::Rademacher);
    assert!(fit_condexp(&CondExpEstimator::ExactTree, &r, &[0.0; 8]).is_err());
}

#[test]
fn nested_backend_only_for_function_targets() {
    let x = gaussian_regressors(10, 1);
    let r = reg(&x, 0, 1, NoiseLayout::Sampled, NoiseMode::Gaussian);
    let est = CondExpEstimator::Nested { inner: 100, seed: 3 };
    assert!(fit_condexp(&est, &r, &[0.0; 10]).is_err());
    let out = nested_condexp(&est, 10, |m, rng| m as f64 + rng.gen_range(-0.5..0.5)).unwrap();
    for (m, v) in out.iter().enumerate() {
        assert!((v.mean - m as f64).abs() < 5.0 * v.se + 1e-12);
    }
    let again = nested_condexp(&est, 10, |m, rng| m as f64 + rng.gen_range(-0.5..0.5)).unwrap();
    assert_eq!(out, again);
}

#[test]
fn target_length_is_checked() {
    let x = gaussian_regressors(20, 1);
    let r = reg(&x, 0, 1, NoiseLayout::Sampled, NoiseMode::Gaussian);
    assert!(fit_condexp(&CondExpEstimator::Lsmc(BasisSpec::default()), &r, &[0.0; 19]).is_err());
}

proptest! {
    #[test]
    fn lsmc_is_linear_in_the_target(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = gaussian_regressors(200, seed);
        let r = reg(&x, 1, 2, NoiseLayout::Sampled, NoiseMode::Gaussian);
        let est = CondExpEstimator::Lsmc(BasisSpec::Polynomial { degree: 2 });
        let u: Vec<f64> = x.column(0).iter().map(|v| v.sin()).collect();
        let v: Vec<f64> = x.column(0).iter().map(|v| v.abs()).collect();
        let w: Vec<f64> = u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect();
        let (fu, fv, fw) = (fit_condexp(&est, &r, &u).unwrap(), fit_condexp(&est, &r, &v).unwrap(), fit_condexp(&est, &r, &w).unwrap());
        for k in 0..200 {
            prop_assert!((fw[k] - a * fu[k] - b * fv[k]).abs() < 1e-9 * (1.0 + fw[k].abs()));
        }
    }

    #[test]
    fn tree_weighted_estimate_matches_the_direct_one(n in 1usize..8, depth in 0usize..8, values in prop::collection::vec(-5.0f64..5.0, 128)) {
        let depth = depth.min(n - 1);
        let p = Partition::uniform(1.0, n).unwrap();
        let t = NoiseEnsemble::tree(&p).unwrap();
        let m = t.paths();
        let x = Array2::<f64>::zeros((m, 1));
        let r = reg(&x, depth, n, NoiseLayout::Tree, NoiseMode::Rademacher);
        let h: Array2<f64> = Array2::from_shape_fn((m, 1), |(k, _)| t.dw(k, depth, 0));
        let targets = &values[..m];
        let z = weighted_condexp(&CondExpEstimator::ExactTree, &r, targets, h.view()).unwrap();
        let prod: Vec<f64> = targets.iter().zip(h.column(0)).map(|(a, b)| a * b).collect();
        let direct = fit_condexp(&CondExpEstimator::ExactTree, &r, &prod).unwrap();
        for k in 0..m {
            prop_assert!((z[[k, 0]] - direct[k]).abs() < 1e-14);
        }
    }
}
