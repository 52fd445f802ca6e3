use std::collections::BTreeSet;

use domainmix_core::cluster::{dbscan, quantity_keep, select_reliable, ClusterAssignment, CriteriaFlags, DbscanParams};
use domainmix_core::testing::dbscan_oracle;
use proptest::prelude::*;

/// Points on a coarse grid (so exact-eps ties occur) or continuous, 1-60 of them in 1-4 dims.
fn point_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=4, 1usize..=60, any::<bool>()).prop_flat_map(|(d, n, grid)| {
        let coord = if grid {
            (-8i32..=8).prop_map(|k| k as f64 * 0.25).boxed()
        } else {
            (-2.0..2.0f64).boxed()
        };
        prop::collection::vec(prop::collection::vec(coord, d), n)
    })
}

fn params(eps: f64, min_samples: usize, b: usize) -> DbscanParams {
    DbscanParams::with_eps(eps, min_samples, b)
}

/// Members of each cluster as sets of original indices, order-free.
fn partition(a: &ClusterAssignment, index_of: impl Fn(usize) -> usize) -> BTreeSet<BTreeSet<usize>> {
    a.members()
        .into_iter()
        .map(|m| m.into_iter().map(&index_of).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dbscan_matches_reachability_oracle(pts in point_set(), eps in 0.1..1.2f64, min in 1usize..6) {
        let ours = dbscan(&pts, eps, min).unwrap();
        prop_assert_eq!(ours.labels, dbscan_oracle(&pts, eps, min));
    }

    #[test]
    fn dbscan_partition_survives_permutation(pts in point_set(), eps in 0.1..1.2f64, min in 1usize..6, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.shuffle(&mut domainmix_core::rng::SeedTree::new(seed).rng("perm"));
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let a = dbscan(&pts, eps, min).unwrap();
        let b = dbscan(&shuffled, eps, min).unwrap();

        // Border points within reach of two clusters may legitimately follow
        // scan order; compare everything else.
        let near = |i: usize, j: usize| domainmix_core::diffcore::l2_dist(&pts[i], &pts[j]) <= eps;
        let core: Vec<bool> = (0..pts.len()).map(|i| (0..pts.len()).filter(|&j| near(i, j)).count() >= min).collect();
        let ambiguous: BTreeSet<usize> = (0..pts.len())
            .filter(|&i| !core[i])
            .filter(|&i| {
                let hosts: BTreeSet<usize> = (0..pts.len()).filter(|&j| core[j] && near(i, j)).filter_map(|j| a.labels[j]).collect();
                hosts.len() > 1
            })
            .collect();
        let strip = |p: BTreeSet<BTreeSet<usize>>| -> BTreeSet<BTreeSet<usize>> {
            p.into_iter().map(|c| c.difference(&ambiguous).copied().collect()).collect()
        };
        prop_assert_eq!(strip(partition(&a, |i| i)), strip(partition(&b, |i| perm[i])));
        prop_assert_eq!(a.n_clusters(), b.n_clusters());
    }

    #[test]
    fn quantity_keep_shrinks_as_bound_grows(pts in point_set(), eps in 0.1..1.2f64, min in 1usize..5) {
        let a = dbscan(&pts, eps, min).unwrap();
        let mut prev = quantity_keep(&a, 1);
        for b in 2..=12 {
            let next = quantity_keep(&a, b);
            prop_assert!(next.is_subset(&prev));
            prev = next;
        }
    }

    #[test]
    fn quantity_bounds_pseudo_class_count(pts in point_set(), eps in 0.1..1.2f64, min in 1usize..5, b in 2usize..8) {
        let flags = CriteriaFlags { quantity: true, ..CriteriaFlags::NONE };
        let s = select_reliable(&pts, &params(eps, min, b), flags).unwrap();
        prop_assert!(s.n_kept * b <= pts.len());
    }

    #[test]
    fn all_criteria_keep_a_subset_of_each(pts in point_set(), eps in 0.1..1.2f64, min in 1usize..5, b in 1usize..8) {
        let p = params(eps, min, b);
        let kept_points = |flags| -> BTreeSet<usize> {
            let s = select_reliable(&pts, &p, flags).unwrap();
            s.pseudo_labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(i, _)| i).collect()
        };
        let all = kept_points(CriteriaFlags::ALL);
        for single in [
            CriteriaFlags { independence: true, ..CriteriaFlags::NONE },
            CriteriaFlags { compactness: true, ..CriteriaFlags::NONE },
            CriteriaFlags { quantity: true, ..CriteriaFlags::NONE },
        ] {
            prop_assert!(all.is_subset(&kept_points(single)));
        }
    }
}

#[test]
fn no_criteria_gives_raw_cluster_count() {
    let pts: Vec<Vec<f64>> = [0.0, 0.1, 0.2, 3.0, 3.1, 3.2, 9.0].iter().map(|&x| vec![x]).collect();
    let s = select_reliable(&pts, &params(0.15, 2, 4), CriteriaFlags::NONE).unwrap();
    assert_eq!(s.n_kept, dbscan(&pts, 0.15, 2).unwrap().n_clusters());
    assert_eq!(s.n_kept, 2);
}
