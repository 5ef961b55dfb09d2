mod common;

use gammarank::model::{log_density_counts, log_density_gamma, log_density_gamma_unordered};
use gammarank::scalar::log_sum_exp;
use gammarank::structures::{enumerate_ordered_structures, enumerate_partitions, orderings, ExperimentLayout};
use gammarank::SharedParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(alpha: u32, alpha0: u32, nu0: f64) -> SharedParams {
    SharedParams::new(alpha, alpha0, nu0).unwrap()
}

#[test]
fn gamma_components_integrate_to_one() {
    let layout = ExperimentLayout::new(vec![1, 2], None).unwrap();
    let catalog = enumerate_ordered_structures(2).unwrap();
    for pr in [params(2, 3, 1.0), params(5, 2, 20.0)] {
        let centre = pr.nu0.ln();
        for eta in &catalog {
            let integral = common::trapezoid_2d(
                |u, v| {
                    let (x, y) = (u.exp(), v.exp());
                    (log_density_gamma(&[x, y], eta, &layout, &pr).unwrap() + u + v).exp()
                },
                centre - 30.0,
                centre + 30.0,
                1500,
            );
            assert!((integral - 1.0).abs() < 0.01, "{eta} {pr:?}: {integral}");
        }
    }
}

#[test]
fn count_null_is_negative_multinomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let null = enumerate_ordered_structures(3).unwrap().remove(0);
    assert!(null.is_null());
    for _ in 0..100 {
        let sizes: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..3.0)).collect();
        let layout = ExperimentLayout::new(vec![1, 1, 2, 2, 3, 3], Some(sizes.clone())).unwrap();
        let pr = params(1, rng.gen_range(1..10), rng.gen_range(0.01..2.0));
        let x: Vec<u64> = (0..6).map(|_| rng.gen_range(0..60)).collect();
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let ours = log_density_counts(&xf, &null, &layout, &pr).unwrap();
        let oracle = common::negative_multinomial_ln_pmf(&x, &sizes, pr.alpha0 as f64, pr.alpha0 as f64 * pr.nu0);
        assert!((ours - oracle).abs() < 1e-10, "{x:?}: {ours} vs {oracle}");
    }
}

#[test]
fn count_components_sum_to_one() {
    let layout = ExperimentLayout::new(vec![1, 2], Some(vec![1.0, 1.0])).unwrap();
    for pr in [params(1, 4, 0.2), params(1, 2, 1.0)] {
        for eta in enumerate_ordered_structures(2).unwrap() {
            let mut terms = Vec::new();
            for x1 in 0..=200u32 {
                for x2 in 0..=(200 - x1) {
                    terms.push(log_density_counts(&[x1 as f64, x2 as f64], &eta, &layout, &pr).unwrap());
                }
            }
            let total = log_sum_exp(&terms).exp();
            assert!(total >= 0.999 && total <= 1.0 + 1e-9, "{eta}: {total}");
        }
    }
}

#[test]
fn orderings_average_to_unordered_component() {
    let layout = ExperimentLayout::balanced(3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pr = params(4, 3, 5.0);
    for _ in 0..20 {
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..20.0)).collect();
        for u in enumerate_partitions(3).unwrap() {
            let k = u.num_blocks();
            let fact: f64 = (1..=k).map(|i| i as f64).product();
            let logs: Vec<f64> = orderings(&u)
                .iter()
                .map(|eta| log_density_gamma(&x, eta, &layout, &pr).unwrap())
                .collect();
            let lhs = log_sum_exp(&logs) - fact.ln();
            let rhs = log_density_gamma_unordered(&x, &u, &layout, &pr).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{u}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn counts_exchangeable_within_block() {
    let layout = ExperimentLayout::new(vec![1, 1, 1, 2, 2], Some(vec![2.0; 5])).unwrap();
    let pr = params(1, 3, 0.5);
    for eta in enumerate_ordered_structures(2).unwrap() {
        let a = log_density_counts(&[3.0, 9.0, 1.0, 4.0, 0.0], &eta, &layout, &pr).unwrap();
        let b = log_density_counts(&[1.0, 3.0, 9.0, 0.0, 4.0], &eta, &layout, &pr).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scale_equivariance(
        x in prop::collection::vec((-2.0f64..2.0).prop_map(|e| 10f64.powf(e)), 6),
        pick in 0usize..13,
        log_b in -3.0f64..3.0,
        alpha in 1u32..20,
        alpha0 in 1u32..20,
        nu0 in 0.1f64..50.0,
    ) {
        let layout = ExperimentLayout::balanced(3, 2).unwrap();
        let eta = &enumerate_ordered_structures(3).unwrap()[pick];
        let b = 10f64.powf(log_b);
        let base = log_density_gamma(&x, eta, &layout, &params(alpha, alpha0, nu0)).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * b).collect();
        let scaled = log_density_gamma(&xs, eta, &layout, &params(alpha, alpha0, nu0 * b)).unwrap();
        prop_assert!((scaled - (base - 6.0 * b.ln())).abs() < 1e-10, "{} vs {}", scaled, base - 6.0 * b.ln());
    }

    #[test]
    fn densities_are_finite(
        x in prop::collection::vec((-8.0f64..8.0).prop_map(|e| 10f64.powf(e)), 6),
        counts in prop::collection::vec(0u32..=1_000_000, 6),
        pick in 0usize..13,
    ) {
        let layout = ExperimentLayout::new(vec![1, 1, 2, 2, 3, 3], Some(vec![1.0, 2.0, 0.5, 1.0, 3.0, 1.0])).unwrap();
        let eta = &enumerate_ordered_structures(3).unwrap()[pick];
        let pr = params(10, 3, 32.0);
        prop_assert!(log_density_gamma(&x, eta, &layout, &pr).unwrap().is_finite());
        let c: Vec<f64> = counts.iter().map(|&v| v as f64).collect();
        prop_assert!(log_density_counts(&c, eta, &layout, &pr).unwrap().is_finite());
    }

    #[test]
    fn null_is_symmetric(x in 1e-3f64..1e3, y in 1e-3f64..1e3) {
        let layout = ExperimentLayout::new(vec![1, 2], None).unwrap();
        let null = enumerate_ordered_structures(2).unwrap().remove(0);
        let pr = params(3, 2, 4.0);
        prop_assert_eq!(
            log_density_gamma(&[x, y], &null, &layout, &pr).unwrap(),
            log_density_gamma(&[y, x], &null, &layout, &pr).unwrap()
        );
    }
}
