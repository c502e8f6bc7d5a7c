use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{nearest, sq_dist};
use crate::datagen::LabeledSet;
use crate::diffcore::Tensor;
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Mean of each class's labeled features, ordered by class id.
pub fn init_known_centroids(labeled: &LabeledSet) -> Result<(Vec<usize>, Tensor)> {
    let dim = labeled.features.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &y) in labeled.features.iter_rows().zip(&labeled.labels) {
        let e = sums.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
        e.0.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    let classes: Vec<usize> = sums.keys().copied().collect();
    let mut data = Vec::with_capacity(classes.len() * dim);
    for (s, n) in sums.values() {
        if *n == 0 {
            return Err(Error::state("class without labeled samples"));
        }
        data.extend(s.iter().map(|v| v / *n as f64));
    }
    Ok((classes.clone(), Tensor::from_vec(classes.len(), dim, data)?))
}

/// k-means++ (D²) seeding of `k` centroids from `points`. Distances also count
/// the `fixed` centroids, so seeds avoid regions those already cover. With no
/// fixed centroids the first seed is uniform.
pub fn kmeanspp_init(points: &Tensor, k: usize, fixed: &Tensor, seed: u64) -> Result<Tensor> {
    let n = points.rows();
    if k > n {
        return Err(Error::arg(format!("cannot seed {k} centroids from {n} points")));
    }
    let dim = points.cols();
    let mut out = Tensor::zeros(k, dim);
    if k == 0 {
        return Ok(out);
    }
    let mut r = rng::stream(seed, &[tag::CLUSTER, 0x2b2b]);
    let mut chosen = vec![false; n];
    let mut d2 = vec![f64::INFINITY; n];
    for c in fixed.iter_rows() {
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, c));
        }
    }
    for s in 0..k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| d2[i]).sum();
        let pick = if total.is_finite() && total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                if d2[i] > 0.0 {
                    pick = Some(i);
                    target -= d2[i];
                    if target < 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive total mass")
        } else {
            // no fixed centroids yet, or every remaining point coincides with a seed
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[r.random_range(0..free.len())]
        };
        chosen[pick] = true;
        out.row_mut(s).copy_from_slice(points.row(pick));
        let c = points.row(pick).to_vec();
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
    /// Independent seedings; the lowest final inertia wins.
    pub n_init: usize,
    /// After Lloyd converges, move single unlabeled points between clusters
    /// while a move lowers the inertia (Hartigan's rule).
    pub refine: bool,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            n_init: 10,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Known-class centroids first (ordered by class id), then novel ones.
    pub centroids: Tensor,
    pub known_classes: Vec<usize>,
    /// Cluster of every labeled row, then of every unlabeled row.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn unlabeled_assignment(&self, n_labeled: usize) -> &[usize] {
        &self.assignment[n_labeled..]
    }
}

/// Lloyd iterations with labeled points pinned to their class's cluster.
///
/// Known centroids start at labeled class means; `k_novel` further centroids
/// are seeded by k-means++ from the unlabeled points. A novel cluster that
/// empties is re-seeded at the unlabeled point farthest from its centroid.
pub fn ss_kmeans(labeled: &LabeledSet, unlabeled: &Tensor, k_novel: usize, opts: &KMeansOptions, seed: u64) -> Result<KMeansResult> {
    if !labeled.is_empty() && labeled.features.cols() != unlabeled.cols() {
        return Err(Error::dim("labeled and unlabeled features differ in width"));
    }
    if k_novel > unlabeled.rows() {
        return Err(Error::arg(format!(
            "cannot place {k_novel} novel centroids among {} unlabeled points",
            unlabeled.rows()
        )));
    }
    if labeled.is_empty() && k_novel == 0 {
        return Err(Error::arg("no clusters requested"));
    }
    let mut best: Option<KMeansResult> = None;
    for run in 0..opts.n_init.max(1) {
        let res = lloyd(labeled, unlabeled, k_novel, opts, rng::derive(seed, &[run as u64]))?;
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one run"))
}

fn lloyd(labeled: &LabeledSet, unlabeled: &Tensor, k_novel: usize, opts: &KMeansOptions, seed: u64) -> Result<KMeansResult> {
    let dim = unlabeled.cols();
    let (known_classes, known) = if labeled.is_empty() {
        (Vec::new(), Tensor::zeros(0, dim))
    } else {
        init_known_centroids(labeled)?
    };
    let n_known = known_classes.len();
    let class_index: BTreeMap<usize, usize> = known_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let pinned: Vec<usize> = labeled.labels.iter().map(|y| class_index[y]).collect();
    let seeds = kmeanspp_init(unlabeled, k_novel, &known, seed)?;
    let mut centroids = Tensor::vstack(&[&known, &seeds])?;
    let k = n_known + k_novel;
    let n_l = labeled.len();

    let mut assign_u = vec![0usize; unlabeled.rows()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..opts.max_iter.max(1) {
        iterations += 1;
        for (i, x) in unlabeled.iter_rows().enumerate() {
            assign_u[i] = nearest(x, &centroids).0;
        }
        let mut sums = Tensor::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (x, &c) in labeled.features.iter_rows().zip(&pinned) {
            sums.row_mut(c).iter_mut().zip(x).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
        for (x, &c) in unlabeled.iter_rows().zip(&assign_u) {
            sums.row_mut(c).iter_mut().zip(x).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
        let mut next = centroids.clone();
        let mut empty = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                next.row_mut(j).iter_mut().zip(sums.row(j)).for_each(|(c, s)| *c = s / n);
            } else {
                empty.push(j);
            }
        }
        let mut reseeded = vec![false; unlabeled.rows()];
        for j in empty {
            let far = (0..unlabeled.rows())
                .filter(|&i| !reseeded[i])
                .map(|i| (i, sq_dist(unlabeled.row(i), next.row(assign_u[i]))))
                .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                    Some((_, bd)) if bd >= d => acc,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                reseeded[i] = true;
                next.row_mut(j).copy_from_slice(unlabeled.row(i));
            }
        }
        history.push(inertia_of(labeled, &pinned, unlabeled, &assign_u, &next));
        let shift = (0..k)
            .map(|j| sq_dist(centroids.row(j), next.row(j)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < opts.tol {
            break;
        }
    }
    if opts.refine {
        let passes = hartigan(labeled, &pinned, unlabeled, &mut assign_u, &mut centroids, opts.max_iter);
        iterations += passes;
        if passes > 0 {
            history.push(inertia_of(labeled, &pinned, unlabeled, &assign_u, &centroids));
        }
    }
    let assignment: Vec<usize> = pinned.iter().chain(&assign_u).copied().collect();
    debug_assert_eq!(assignment.len(), n_l + unlabeled.rows());
    Ok(KMeansResult {
        centroids,
        known_classes,
        assignment,
        inertia: *history.last().expect("at least one iteration"),
        inertia_history: history,
        iterations,
    })
}

fn inertia_of(labeled: &LabeledSet, pinned: &[usize], unlabeled: &Tensor, assign_u: &[usize], centroids: &Tensor) -> f64 {
    labeled
        .features
        .iter_rows()
        .zip(pinned)
        .map(|(x, &c)| sq_dist(x, centroids.row(c)))
        .chain(unlabeled.iter_rows().zip(assign_u).map(|(x, &c)| sq_dist(x, centroids.row(c))))
        .sum()
}

/// Single-point moves of unlabeled rows. Moving `x` from `a` (size `n_a`) to
/// `b` (size `n_b`) changes the inertia by
/// `n_b/(n_b+1)·|x-μ_b|² - n_a/(n_a-1)·|x-μ_a|²`; the best negative move is
/// taken and both means are updated. Clusters are never emptied. Returns the
/// number of passes that moved at least one point.
fn hartigan(
    labeled: &LabeledSet,
    pinned: &[usize],
    unlabeled: &Tensor,
    assign_u: &mut [usize],
    centroids: &mut Tensor,
    max_passes: usize,
) -> usize {
    let k = centroids.rows();
    let mut sums = Tensor::zeros(k, centroids.cols());
    let mut counts = vec![0usize; k];
    for (x, &c) in labeled.features.iter_rows().zip(pinned).chain(unlabeled.iter_rows().zip(assign_u.iter())) {
        sums.row_mut(c).iter_mut().zip(x).for_each(|(s, v)| *s += v);
        counts[c] += 1;
    }
    let mut moved_passes = 0;
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, x) in unlabeled.iter_rows().enumerate() {
            let a = assign_u[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(x, centroids.row(a));
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist(x, centroids.row(b));
                if best.is_none_or(|(_, c)| add < c) {
                    best = Some((b, add));
                }
            }
            let Some((b, add)) = best else { continue };
            if add >= remove * (1.0 - 1e-12) {
                continue;
            }
            sums.row_mut(a).iter_mut().zip(x).for_each(|(s, v)| *s -= v);
            sums.row_mut(b).iter_mut().zip(x).for_each(|(s, v)| *s += v);
            counts[a] -= 1;
            counts[b] += 1;
            for c in [a, b] {
                let n = counts[c] as f64;
                let mean: Vec<f64> = sums.row(c).iter().map(|s| s / n).collect();
                centroids.row_mut(c).copy_from_slice(&mean);
            }
            assign_u[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        moved_passes += 1;
    }
    moved_passes
}
