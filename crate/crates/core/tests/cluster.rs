mod common;

use gammarank::cluster::{adjusted_rand_index, assign_bayes, assign_threshold, assignment_ari, cluster_summary};
use gammarank::em::EmConfig;
use ndarray::Array2;
use proptest::prelude::*;

fn posterior_strategy() -> impl Strategy<Value = Array2<f64>> {
    (1usize..30, 2usize..8).prop_flat_map(|(rows, k)| {
        prop::collection::vec(0.001f64..1.0, rows * k).prop_map(move |v| {
            let mut m = Array2::from_shape_vec((rows, k), v).unwrap();
            for mut row in m.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            m
        })
    })
}

proptest! {
    #[test]
    fn bayes_clusters_partition_rows(post in posterior_strategy()) {
        let a = assign_bayes(post.view());
        let mut all: Vec<usize> = a.members.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..post.nrows()).collect::<Vec<_>>());
    }

    #[test]
    fn threshold_above_half_is_disjoint(post in posterior_strategy(), c in 0.5001f64..1.0) {
        let a = assign_threshold(post.view(), c).unwrap();
        let mut all: Vec<usize> = a.members.iter().flatten().copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(n + a.unassigned().len(), post.nrows());
        for (g, r) in a.rows.iter().enumerate() {
            if r.assigned {
                prop_assert!(post[[g, r.structure]] >= c);
            }
        }
    }

    #[test]
    fn argmax_invariant_to_row_scaling(post in posterior_strategy(), scale in prop::collection::vec(0.01f64..100.0, 30)) {
        let mut scaled = post.clone();
        for (mut row, s) in scaled.rows_mut().into_iter().zip(&scale) {
            row *= *s;
            let total = row.sum();
            row /= total;
        }
        let a = assign_bayes(post.view());
        let b = assign_bayes(scaled.view());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            prop_assert_eq!(x.structure, y.structure);
        }
    }

    #[test]
    fn ari_matches_pair_counting(
        a in prop::collection::vec(0usize..4, 2..40),
        seed in prop::collection::vec(0usize..5, 40),
        perm in Just([3usize, 0, 4, 1, 2]),
    ) {
        let b: Vec<usize> = seed[..a.len()].to_vec();
        let ours = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((ours - common::ari_pairs(&a, &b)).abs() < 1e-12);
        prop_assert!((ours - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        let relabeled: Vec<usize> = b.iter().map(|&l| perm[l]).collect();
        prop_assert!((ours - adjusted_rand_index(&a, &relabeled).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn threshold_shrinks_clusters_monotonically() {
    let fx = common::gamma_fixture(3, 3, 3000, (10, 3, 32.0), None, 21);
    let fit = fx.fit(&EmConfig::default());
    let mut previous: Option<gammarank::ClusterAssignment> = None;
    for step in 0..=9 {
        let c = 0.5 + 0.05 * step as f64;
        let a = assign_threshold(fit.posterior.view(), c).unwrap();
        if let Some(prev) = &previous {
            for (now, before) in a.members.iter().zip(&prev.members) {
                assert!(now.iter().all(|g| before.contains(g)));
            }
            assert!(a.unassigned().len() >= prev.unassigned().len());
        }
        let summary = cluster_summary(&a, &fx.catalog);
        assert_eq!(
            summary.unassigned + summary.clusters.iter().map(|c| c.size).sum::<usize>(),
            3000
        );
        previous = Some(a);
    }
}

#[test]
fn bayes_assignment_is_better_than_chance() {
    let fx = common::gamma_fixture(2, 3, 2000, (10, 3, 32.0), Some(vec![0.2, 0.5, 0.3]), 22);
    let fit = fx.fit(&EmConfig::default());
    let fitted = assign_bayes(fit.posterior.view());
    let labels: Vec<usize> = fitted.labels().into_iter().map(Option::unwrap).collect();
    let ari = adjusted_rand_index(&labels, &fx.sim.labels).unwrap();
    assert!(ari > 0.2, "ARI {ari}");
    // shuffled truth is a negative control
    let mut shuffled = fx.sim.labels.clone();
    shuffled.rotate_left(777);
    assert!(adjusted_rand_index(&labels, &shuffled).unwrap().abs() < 0.05);
    assert_eq!(assignment_ari(&fitted, &fitted).unwrap(), 1.0);
}
