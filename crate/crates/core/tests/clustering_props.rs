//! Property tests for the clustering phase against small exhaustive oracles.

use std::collections::BTreeMap;

use gccd_core::clustering::{cluster_accuracy, hungarian, ss_kmeans, KMeansOptions};
use gccd_core::datagen::LabeledSet;
use gccd_core::diffcore::Tensor;
use proptest::prelude::*;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn square(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0u8..20, n), n))
        .prop_map(|m| m.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
}

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_total_is_the_permutation_minimum(cost in square(6)) {
        let n = cost.len();
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let m = hungarian(&cost).unwrap();
        prop_assert_eq!(m.total_cost, best);
        let mut cols: Vec<usize> = m.row_to_col.iter().map(|c| c.unwrap()).collect();
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn labeled_points_keep_their_class(
        lab in points(6),
        unl in points(6),
        labels in prop::collection::vec(0usize..3, 6),
        k_novel in 0usize..3,
        seed in 0u64..1000,
    ) {
        let labeled = LabeledSet { features: Tensor::from_rows(&lab).unwrap(), labels: labels.clone() };
        let unlabeled = Tensor::from_rows(&unl).unwrap();
        let res = ss_kmeans(&labeled, &unlabeled, k_novel, &KMeansOptions::default(), seed).unwrap();
        let mut classes = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        for (i, &l) in labels.iter().enumerate() {
            prop_assert_eq!(res.assignment[i], classes.binary_search(&l).unwrap());
        }
        prop_assert!(res.assignment.iter().all(|&a| a < classes.len() + k_novel));
    }

    #[test]
    fn ss_kmeans_is_deterministic(unl in points(8), seed in 0u64..1000) {
        let unlabeled = Tensor::from_rows(&unl).unwrap();
        let a = ss_kmeans(&LabeledSet::empty(2), &unlabeled, 3, &KMeansOptions::default(), seed).unwrap();
        let b = ss_kmeans(&LabeledSet::empty(2), &unlabeled, 3, &KMeansOptions::default(), seed).unwrap();
        prop_assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn accuracy_ignores_novel_cluster_names(
        pred in prop::collection::vec(0usize..5, 12),
        truth in prop::collection::vec(0usize..5, 12),
        shift in 1usize..5,
    ) {
        // clusters 0 and 1 are fixed to classes 0 and 1; the rest are renamed
        let fixed: BTreeMap<usize, usize> = [(0, 0), (1, 1)].into();
        let renamed: Vec<usize> = pred.iter().map(|&p| if p < 2 { p } else { 10 + (p + shift) % 5 }).collect();
        prop_assert_eq!(cluster_accuracy(&pred, &truth, &fixed), cluster_accuracy(&renamed, &truth, &fixed));
    }
}
