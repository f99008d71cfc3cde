use proptest::prelude::*;

use qfbsde::grid::{refine_couple, sample_noise, sample_noise_range, NoiseEnsemble, NoiseMode, Partition, RefinementMap};

#[test]
fn partition_rejects_bad_grids() {
    assert!(Partition::uniform(0.0, 4).is_err());
    assert!(Partition::uniform(1.0, 0).is_err());
    assert!(Partition::from_times(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    assert!(Partition::from_times(vec![0.1, 0.5, 1.0]).is_err());
    let p = Partition::from_times(vec![0.0, 0.25, 1.0]).unwrap();
    assert_eq!(p.steps(), 2);
    assert_eq!(p.h(), 0.75);
    assert_eq!(p.floor_index(0.3).unwrap(), 1);
    assert_eq!(p.floor_index(1.0).unwrap(), 1);
}

#[test]
fn same_seed_same_increments() {
    let p = Partition::uniform(1.0, 16).unwrap();
    let a = sample_noise(&p, 50, 2, NoiseMode::Gaussian, 9).unwrap();
    let b = sample_noise(&p, 50, 2, NoiseMode::Gaussian, 9).unwrap();
    let c = sample_noise(&p, 50, 2, NoiseMode::Gaussian, 10).unwrap();
    assert_eq!(a.increments(), b.increments());
    assert_ne!(a.increments(), c.increments());
}

#[test]
fn rademacher_increments_are_plus_minus_sqrt_dt() {
    let p = Partition::from_times(vec![0.0, 0.25, 1.0]).unwrap();
    let e = sample_noise(&p, 40, 1, NoiseMode::Rademacher, 3).unwrap();
    for m in 0..40 {
        assert_eq!(e.dw(m, 0, 0).abs(), 0.5);
        assert_eq!(e.dw(m, 1, 0).abs(), 0.75f64.sqrt());
    }
}

#[test]
fn tree_enumerates_all_paths() {
    let p = Partition::uniform(1.0, 5).unwrap();
    let t = NoiseEnsemble::tree(&p).unwrap();
    assert_eq!(t.paths(), 32);
    let mut ends: Vec<i64> = (0..32).map(|m| (t.path_value(m, 5, 0) / 0.2f64.sqrt()).round() as i64).collect();
    ends.sort();
    assert_eq!(ends.first(), Some(&-5));
    assert_eq!(ends.last(), Some(&5));
    let total: f64 = (0..32).map(|m| t.path_value(m, 5, 0)).sum();
    assert!(total.abs() < 1e-12);
}

#[test]
fn refinement_needs_nested_grids() {
    let fine = Partition::uniform(1.0, 6).unwrap();
    let coarse = Partition::uniform(1.0, 4).unwrap();
    assert!(RefinementMap::new(fine, coarse).is_err());
}

proptest! {
    #[test]
    fn ranges_reproduce_the_full_ensemble(n in 1usize..12, paths in 2usize..40, split in 1usize..39, seed in any::<u64>()) {
        let split = split.min(paths - 1);
        let p = Partition::uniform(1.0, n).unwrap();
        let full = sample_noise(&p, paths, 2, NoiseMode::Gaussian, seed).unwrap();
        let tail = sample_noise_range(&p, split as u64, paths - split, 2, NoiseMode::Gaussian, seed).unwrap();
        for m in split..paths {
            for i in 0..n {
                for k in 0..2 {
                    prop_assert_eq!(full.dw(m, i, k), tail.dw(m - split, i, k));
                }
            }
        }
    }

    #[test]
    fn coupled_coarse_increments_sum_fine_ones(n in 1usize..10, factor in 2usize..6, seed in any::<u64>()) {
        let coarse = Partition::uniform(1.3, n).unwrap();
        let map = RefinementMap::uniform(&coarse, factor).unwrap();
        let fine = sample_noise(map.fine(), 8, 1, NoiseMode::Gaussian, seed).unwrap();
        let c = refine_couple(&fine, &map).unwrap();
        prop_assert!(c.is_coupled_with(&fine));
        for m in 0..8 {
            for j in 0..n {
                let s: f64 = map.fine_range(j).map(|i| fine.dw(m, i, 0)).sum();
                prop_assert!((s - c.dw(m, j, 0)).abs() < 1e-12);
            }
            prop_assert!((fine.path_value(m, n * factor, 0) - c.path_value(m, n, 0)).abs() < 1e-12);
        }
    }
}
