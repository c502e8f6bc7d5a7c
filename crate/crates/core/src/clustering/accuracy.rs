use std::collections::{BTreeMap, BTreeSet};

use super::hungarian;

/// Cluster → class map: `fixed` clusters keep their class; every other
/// cluster is matched one-to-one to a class not claimed by `fixed`,
/// maximizing the number of co-occurring samples.
pub fn cluster_mapping(pred: &[usize], truth: &[usize], fixed: &BTreeMap<usize, usize>) -> BTreeMap<usize, usize> {
    let taken: BTreeSet<usize> = fixed.values().copied().collect();
    let free_clusters: Vec<usize> = pred
        .iter()
        .copied()
        .filter(|c| !fixed.contains_key(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let free_classes: Vec<usize> = truth
        .iter()
        .copied()
        .filter(|c| !taken.contains(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut mapping = fixed.clone();
    if free_clusters.is_empty() || free_classes.is_empty() {
        return mapping;
    }
    let ci: BTreeMap<usize, usize> = free_clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ki: BTreeMap<usize, usize> = free_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = vec![vec![0.0; free_classes.len()]; free_clusters.len()];
    for (p, t) in pred.iter().zip(truth) {
        if let (Some(&i), Some(&j)) = (ci.get(p), ki.get(t)) {
            counts[i][j] += 1.0;
        }
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&c| -c).collect()).collect();
    let matching = hungarian(&cost).expect("finite counts");
    for (i, col) in matching.row_to_col.iter().enumerate() {
        if let Some(j) = col {
            mapping.insert(free_clusters[i], free_classes[*j]);
        }
    }
    mapping
}

/// Fraction of samples whose matched class equals the true label.
pub fn cluster_accuracy(pred: &[usize], truth: &[usize], fixed: &BTreeMap<usize, usize>) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction and label counts differ");
    if pred.is_empty() {
        return 0.0;
    }
    let mapping = cluster_mapping(pred, truth, fixed);
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| mapping.get(p) == Some(t))
        .count();
    hits as f64 / pred.len() as f64
}
