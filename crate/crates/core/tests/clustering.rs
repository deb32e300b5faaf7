mod common;

use common::{
    check_ward_merges, optimal_partition_sse, pairwise_ari, random_points, separated_points,
};
use hemoembed::clustering::{
    adjusted_rand_index, kmeans, label_repeats, relabel_by_first_appearance, ward_agglomerative,
    ward_linkage, within_cluster_ss,
};
use proptest::prelude::*;

#[test]
fn ward_merges_match_brute_force() {
    for (n, d, seed) in [
        (2, 1, 0),
        (3, 2, 1),
        (7, 3, 2),
        (12, 2, 3),
        (25, 4, 4),
        (50, 3, 5),
    ] {
        let points = random_points(n, d, seed);
        let dendrogram = ward_linkage(&points).unwrap();
        assert_eq!(dendrogram.merges.len(), n - 1);
        check_ward_merges(&points, &dendrogram).unwrap_or_else(|e| panic!("n={n}: {e}"));
    }
}

#[test]
fn ward_cut_recovers_separated_groups() {
    let points = separated_points(&[5, 7, 4], 3, 9);
    let (assignment, _) = ward_agglomerative(&points, 3).unwrap();
    let truth: Vec<usize> = [0; 5].into_iter().chain([1; 7]).chain([2; 4]).collect();
    assert_eq!(assignment.labels, truth);
}

#[test]
fn kmeans_objective_never_increases() {
    for seed in 0..20 {
        let points = random_points(60, 3, seed);
        let r = kmeans(&points, 4, seed, 100).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12 * w[0].abs(),
                "seed {seed}: {:?}",
                r.objective_trace
            );
        }
        let direct = within_cluster_ss(&points, &r.assignment.labels);
        assert!((direct - r.objective()).abs() < 1e-9);
    }
}

#[test]
fn kmeans_is_bounded_by_the_exhaustive_optimum() {
    for seed in 0..30 {
        let n = 4 + (seed as usize % 5);
        let k = 2 + (seed as usize % 3).min(n - 2);
        let points = random_points(n, 2, seed);
        let best = optimal_partition_sse(&points, k);
        let got = kmeans(&points, k, seed, 100).unwrap().objective();
        assert!(got >= best - 1e-9, "seed {seed}: {got} < optimum {best}");
    }
}

#[test]
fn kmeans_reaches_the_optimum_on_separated_data() {
    for seed in 0..10 {
        let points = separated_points(&[3, 2, 3], 2, seed);
        let best = optimal_partition_sse(&points, 3);
        let got = kmeans(&points, 3, seed, 100).unwrap().objective();
        assert!((got - best).abs() < 1e-9, "seed {seed}: {got} vs {best}");
    }
}

#[test]
fn ari_reference_values() {
    let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    assert!((ari + 0.5).abs() < 1e-12, "{ari}");
    assert_eq!(
        adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(),
        1.0
    );
}

#[test]
fn repeats_count_returning_labels() {
    assert_eq!(label_repeats(&[0, 0, 1, 1, 2]), 0);
    assert_eq!(label_repeats(&[0, 1, 0, 1, 0]), 3);
    assert_eq!(
        relabel_by_first_appearance(&[4, 4, 1, 7, 1]),
        vec![0, 0, 1, 2, 1]
    );
}

proptest! {
    #[test]
    fn ari_matches_pair_counting(a in prop::collection::vec(0usize..4, 2..40), seed in 0u64..1000) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x + (i as u64 * 31 + seed) as usize % 3) % 4).collect();
        let got = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((got - pairwise_ari(&a, &b)).abs() < 1e-10);
        prop_assert!((got - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ari_ignores_label_names(a in prop::collection::vec(0usize..5, 2..40), shift in 1usize..10) {
        let renamed: Vec<usize> = a.iter().map(|x| (x + shift) * 3).collect();
        prop_assert!((adjusted_rand_index(&a, &renamed).unwrap() - 1.0).abs() < 1e-12);
    }
}
