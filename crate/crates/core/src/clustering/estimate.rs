use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cluster_accuracy, sq_dist, ss_kmeans, KMeansOptions};
use crate::datagen::{LabeledSet, TaskData};
use crate::diffcore::{Mlp, Tensor};
use crate::parallel::{self, Exec};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateOptions {
    pub kmeans: KMeansOptions,
    /// Independent hidden-half draws averaged per candidate.
    pub repeats: usize,
    /// Accuracies closer than this to the best count as tied.
    pub tie_tolerance: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            kmeans: KMeansOptions::default(),
            repeats: 2,
            tie_tolerance: 1e-9,
        }
    }
}

/// Score of one candidate class count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub k: usize,
    /// Mean clustering accuracy on the hidden labeled half.
    pub accuracy: f64,
    /// Mean Calinski-Harabasz index of the clustering pass.
    pub calinski_harabasz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowEstimate {
    pub k: usize,
    pub curve: Vec<Candidate>,
}

/// Estimate the total class count of a task in the encoder's latent space.
pub fn estimate_class_count(
    task: &TaskData,
    encoder: &Mlp,
    k_min: usize,
    k_max: usize,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<ElbowEstimate> {
    let labeled = LabeledSet {
        features: encoder.forward_eval(&task.labeled.features)?,
        labels: task.labeled.labels.clone(),
    };
    let unlabeled = encoder.forward_eval(task.unlabeled.features())?;
    estimate_class_count_embedded(&labeled, &unlabeled, k_min, k_max, seed, opts, Exec::default())
}

/// Class-count estimation on already embedded data.
///
/// For each candidate `k`, half of every known class's labeled samples stay
/// pinned and the rest join the unlabeled pool; the clustering is scored by
/// its accuracy on that hidden half. The best accuracy wins. Candidates tied
/// on accuracy are separated by the Calinski-Harabasz index, and after that
/// the smallest `k` wins.
pub fn estimate_class_count_embedded(
    labeled: &LabeledSet,
    unlabeled: &Tensor,
    k_min: usize,
    k_max: usize,
    seed: u64,
    opts: &EstimateOptions,
    exec: Exec,
) -> Result<ElbowEstimate> {
    if k_max < k_min {
        return Err(Error::arg(format!("empty class-count range [{k_min}, {k_max}]")));
    }
    let n_known = labeled.labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if k_min < n_known {
        return Err(Error::arg(format!("k_min {k_min} is below the {n_known} known classes")));
    }
    let splits: Vec<Split> = (0..opts.repeats.max(1))
        .map(|r| Split::draw(labeled, unlabeled, rng::derive(seed, &[tag::ESTIMATE, r as u64])))
        .collect::<Result<_>>()?;
    let max_novel = splits.iter().map(|s| s.pool.rows()).min().unwrap_or(0);
    if k_max - n_known > max_novel {
        return Err(Error::arg(format!("k_max {k_max} exceeds the points available for clustering")));
    }
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let curve: Vec<Result<Candidate>> = parallel::map(exec, &ks, |&k| {
        let mut acc = 0.0;
        let mut ch = 0.0;
        for (r, split) in splits.iter().enumerate() {
            let (a, c) = split.score(k - n_known, &opts.kmeans, rng::derive(seed, &[tag::ESTIMATE, 0x6b, k as u64, r as u64]))?;
            acc += a;
            ch += c;
        }
        let n = splits.len() as f64;
        Ok(Candidate {
            k,
            accuracy: acc / n,
            calinski_harabasz: ch / n,
        })
    });
    let curve: Vec<Candidate> = curve.into_iter().collect::<Result<_>>()?;
    Ok(ElbowEstimate {
        k: select(&curve, opts.tie_tolerance),
        curve,
    })
}

fn select(curve: &[Candidate], tol: f64) -> usize {
    let best_acc = curve.iter().map(|c| c.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<&Candidate> = None;
    for c in curve.iter().filter(|c| c.accuracy >= best_acc - tol) {
        if best.is_none_or(|b| c.calinski_harabasz > b.calinski_harabasz * (1.0 + 1e-12) + 1e-300) {
            best = Some(c);
        }
    }
    best.expect("non-empty curve").k
}

/// One pinned/hidden division of the labeled data.
struct Split {
    pinned: LabeledSet,
    /// Hidden labeled rows first, then the unlabeled rows.
    pool: Tensor,
    hidden_labels: Vec<usize>,
}

impl Split {
    fn draw(labeled: &LabeledSet, unlabeled: &Tensor, seed: u64) -> Result<Self> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labeled.labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let mut r = rng::stream(seed, &[]);
        let (mut keep, mut hide) = (Vec::new(), Vec::new());
        for idx in by_class.values_mut() {
            idx.shuffle(&mut r);
            let n_keep = idx.len().div_ceil(2);
            keep.extend_from_slice(&idx[..n_keep]);
            hide.extend_from_slice(&idx[n_keep..]);
        }
        let hidden = labeled.subset(&hide);
        Ok(Self {
            pinned: labeled.subset(&keep),
            pool: Tensor::vstack(&[&hidden.features, unlabeled])?,
            hidden_labels: hidden.labels,
        })
    }

    fn score(&self, k_novel: usize, opts: &KMeansOptions, seed: u64) -> Result<(f64, f64)> {
        let res = ss_kmeans(&self.pinned, &self.pool, k_novel, opts, seed)?;
        let n_pinned = self.pinned.len();
        let pool_assign = &res.assignment[n_pinned..];
        let fixed: BTreeMap<usize, usize> = res.known_classes.iter().copied().enumerate().collect();
        let acc = if self.hidden_labels.is_empty() {
            0.0
        } else {
            cluster_accuracy(&pool_assign[..self.hidden_labels.len()], &self.hidden_labels, &fixed)
        };
        let all = Tensor::vstack(&[&self.pinned.features, &self.pool])?;
        Ok((acc, calinski_harabasz(&all, &res.assignment, &res.centroids)))
    }
}

/// Between-cluster over within-cluster dispersion, each divided by its
/// degrees of freedom. Zero when undefined.
pub(crate) fn calinski_harabasz(points: &Tensor, assignment: &[usize], centroids: &Tensor) -> f64 {
    let n = points.rows();
    let mut counts = vec![0usize; centroids.rows()];
    for &a in assignment {
        counts[a] += 1;
    }
    let k = counts.iter().filter(|&&c| c > 0).count();
    if k < 2 || n <= k {
        return 0.0;
    }
    let mean = points.mean_rows();
    let mut means = Tensor::zeros(centroids.rows(), points.cols());
    for (x, &a) in points.iter_rows().zip(assignment) {
        means.row_mut(a).iter_mut().zip(x).for_each(|(m, v)| *m += v / counts[a] as f64);
    }
    let between: f64 = (0..centroids.rows()).map(|j| counts[j] as f64 * sq_dist(means.row(j), &mean)).sum();
    let within: f64 = points.iter_rows().zip(assignment).map(|(x, &a)| sq_dist(x, means.row(a))).sum();
    if within <= 0.0 {
        return if between > 0.0 { f64::INFINITY } else { 0.0 };
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}
