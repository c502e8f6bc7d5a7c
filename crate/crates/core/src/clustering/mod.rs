//! Phase 2: semi-supervised k-means, class-count estimation and
//! Hungarian-matched clustering accuracy.

mod accuracy;
mod estimate;
mod hungarian;
mod kmeans;
mod store;

pub use accuracy::{cluster_accuracy, cluster_mapping};
pub use estimate::{estimate_class_count, estimate_class_count_embedded, Candidate, ElbowEstimate, EstimateOptions};
pub use hungarian::{hungarian, Matching};
pub use kmeans::{init_known_centroids, kmeanspp_init, ss_kmeans, KMeansOptions, KMeansResult};
pub use store::{CentroidEntry, CentroidStore, NOVEL_ID_BASE};

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; the lowest index wins ties.
pub(crate) fn nearest(x: &[f64], centroids: &crate::diffcore::Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}
