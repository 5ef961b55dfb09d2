mod common;

use gammarank::em::{
    e_step, em_fit, estimate_shared_params, hessian_quadratic_form, log_marginal, EmConfig, EstimationConfig, Init,
};
use gammarank::model::{log_density_gamma, ObservationModel};
use gammarank::simulator::{simulate, SimulationConfig};
use gammarank::structures::{enumerate_ordered_structures, ExperimentLayout};
use gammarank::SharedParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// p = 3 with positive weights on all 13 structures.
fn p3_weights() -> Vec<f64> {
    let raw = [3.0, 1.0, 1.5, 0.8, 1.2, 1.0, 0.6, 0.7, 0.5, 0.9, 0.4, 0.6, 0.8];
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

#[test]
fn loglik_never_decreases() {
    let fx = common::gamma_fixture(3, 3, 5000, (10, 3, 32.0), Some(p3_weights()), 1);
    let fit = fx.fit(&EmConfig { max_iters: 200, rel_tol: 0.0 });
    for w in fit.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn converged_weights_are_a_fixed_point() {
    let fx = common::gamma_fixture(3, 3, 2000, (10, 3, 32.0), Some(p3_weights()), 2);
    let fit = fx.fit(&EmConfig { max_iters: 20_000, rel_tol: 0.0 });
    let g = fit.posterior.nrows() as f64;
    for (e, &w) in fit.weights.iter().enumerate() {
        let mean = fit.posterior.column(e).sum() / g;
        assert!((mean - w).abs() < 1e-8, "{e}: {mean} vs {w}");
    }
    for row in fit.posterior.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn random_starts_agree() {
    let fx = common::gamma_fixture(3, 3, 5000, (10, 3, 32.0), Some(p3_weights()), 3);
    let ld = fx.logdens();
    let config = EmConfig { max_iters: 100_000, rel_tol: 1e-15 };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let fits: Vec<Vec<f64>> = (0..5)
        .map(|_| em_fit(&ld, &Init::Weights(random_simplex(&mut rng, 13)), &config).unwrap().weights)
        .collect();
    let uniform = em_fit(&ld, &Init::Uniform, &config).unwrap().weights;
    for w in &fits {
        let d = common::max_abs_diff(w, &uniform);
        assert!(d < 1e-6, "max weight difference {d:e}");
    }
}

#[test]
fn posterior_weighted_densities_sum_to_one() {
    let fx = common::gamma_fixture(3, 2, 50, (5, 2, 10.0), None, 4);
    let weights = p3_weights();
    let ld = fx.logdens();
    for row in ld.view().rows() {
        let row = row.as_slice().unwrap();
        let lm = log_marginal(row, &weights);
        let total: f64 = row.iter().zip(&weights).map(|(l, w)| w * (l - lm).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    let (post, _) = e_step(&ld, &weights);
    for row in post.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    // the matrix agrees with the scalar entry point
    let x = fx.sim.data.row(0).to_vec();
    let direct = log_density_gamma(&x, &fx.catalog[5], &fx.layout, &fx.params).unwrap();
    assert_eq!(direct, ld.view()[[0, 5]]);
}

#[test]
fn hessian_form_is_nonnegative_and_quadratic() {
    let fx = common::gamma_fixture(3, 3, 500, (10, 3, 32.0), Some(p3_weights()), 5);
    let ld = fx.logdens();
    let fit = fx.fit(&EmConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = |a: &[f64]| hessian_quadratic_form(&ld, &fit.weights, a, None).unwrap();
    assert_eq!(q(&[0.0; 12]), 0.0);
    for _ in 0..1000 {
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qa = q(&a);
        // G = 500 ≥ 13 structures with continuous data: strictly positive
        assert!(qa > 0.0);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let (qs, qd, qb) = (q(&sum), q(&diff), q(&b));
        // parallelogram law characterises a quadratic form
        let lhs = qs + qd;
        let rhs = 2.0 * qa + 2.0 * qb;
        assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1e-300));
        // polarization is symmetric and homogeneous
        let bab = (qs - qd) / 4.0;
        let scaled: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
        let sum3: Vec<f64> = scaled.iter().zip(&b).map(|(x, y)| x + y).collect();
        let diff3: Vec<f64> = scaled.iter().zip(&b).map(|(x, y)| x - y).collect();
        let b3 = (q(&sum3) - q(&diff3)) / 4.0;
        assert!((b3 - 3.0 * bab).abs() <= 1e-8 * (qa + qb));
    }
}

#[test]
fn hessian_form_independent_of_reference() {
    let fx = common::gamma_fixture(2, 3, 300, (10, 3, 32.0), Some(vec![0.3, 0.4, 0.3]), 6);
    let ld = fx.logdens();
    let fit = fx.fit(&EmConfig::default());
    // the same weight perturbation in two parameterizations: reference 2 with
    // a = (d0, d1), reference 0 with a = (d1, d2) where d2 = −d0 − d1
    let (d0, d1) = (0.3, -0.7);
    let q2 = hessian_quadratic_form(&ld, &fit.weights, &[d0, d1], Some(2)).unwrap();
    let q0 = hessian_quadratic_form(&ld, &fit.weights, &[d1, -d0 - d1], Some(0)).unwrap();
    assert!((q2 - q0).abs() < 1e-9 * q2);
    assert!(hessian_quadratic_form(&ld, &[0.5, 0.5, 0.0], &[1.0, 1.0], None).is_err());
}

#[test]
fn shared_parameter_estimates() {
    let fx = common::gamma_fixture(3, 4, 2000, (10, 3, 32.0), Some(p3_weights()), 8);
    let est = estimate_shared_params(fx.sim.data.view(), &fx.layout, &EstimationConfig::default()).unwrap();
    assert!((8..=12).contains(&est.params.alpha), "alpha {}", est.params.alpha);
    assert!((2..=5).contains(&est.params.alpha0), "alpha0 {}", est.params.alpha0);
    assert_eq!(est.alpha0_profile.len(), 20);
    let best = est.alpha0_profile.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(best.0, est.best_alpha0);
    assert!((est.params.nu0 / 32.0 - 1.0).abs() < 0.15, "nu0 {}", est.params.nu0);
}

#[test]
fn constant_cv_recovers_alpha_exactly() {
    // every row null: within-row CV is exactly that of Gamma(25)
    let layout = ExperimentLayout::balanced(2, 8).unwrap();
    let catalog = enumerate_ordered_structures(2).unwrap();
    let sim = simulate(&SimulationConfig {
        layout: layout.clone(),
        params: SharedParams::new(25, 3, 10.0).unwrap(),
        catalog,
        weights: vec![1.0, 0.0, 0.0],
        rows: 10_000,
        seed: 9,
        model: ObservationModel::Gamma,
    })
    .unwrap();
    let config = EstimationConfig {
        alpha0_grid: vec![3],
        ..Default::default()
    };
    let est = estimate_shared_params(sim.data.view(), &layout, &config).unwrap();
    assert_eq!(est.params.alpha, 25, "raw {}", est.alpha_raw);
}

#[test]
fn estimation_needs_replicates() {
    let layout = ExperimentLayout::new(vec![1, 2, 3], None).unwrap();
    let data = ndarray::array![[1.0, 2.0, 3.0], [2.0, 1.0, 4.0]];
    assert!(estimate_shared_params(data.view(), &layout, &EstimationConfig::default()).is_err());
}
