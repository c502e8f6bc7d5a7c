use serde::{Deserialize, Serialize};

use crate::datagen::ClassKind;
use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Class ids at or above this value name discovered novel clusters rather
/// than ground-truth classes.
pub const NOVEL_ID_BASE: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidEntry {
    pub centroid: Vec<f64>,
    pub class_id: usize,
    /// Task in which the class was discovered.
    pub task_id: usize,
    pub kind: ClassKind,
    /// Index of the encoder whose latent space the centroid lives in.
    pub space: usize,
}

/// Memory of the nearest-centroid classifier.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CentroidStore {
    entries: Vec<CentroidEntry>,
    next_cluster: usize,
}

impl CentroidStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[CentroidEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.centroid.len())
    }

    /// Fresh id for a discovered novel cluster.
    pub fn allocate_cluster_id(&mut self) -> usize {
        let id = NOVEL_ID_BASE + self.next_cluster;
        self.next_cluster += 1;
        id
    }

    pub fn push(&mut self, entry: CentroidEntry) -> Result<()> {
        if entry.centroid.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg(format!("centroid of class {} is not finite", entry.class_id)));
        }
        if let Some(d) = self.dim() {
            if d != entry.centroid.len() {
                return Err(Error::dim(format!("centroid width {} in a store of width {d}", entry.centroid.len())));
            }
        }
        if self.entries.iter().any(|e| e.class_id == entry.class_id) {
            return Err(Error::state(format!("class {} already has a centroid", entry.class_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [CentroidEntry] {
        &mut self.entries
    }

    pub fn matrix(&self) -> Result<Tensor> {
        let d = self.dim().ok_or_else(|| Error::state("centroid store is empty"))?;
        let data = self.entries.iter().flat_map(|e| e.centroid.iter().copied()).collect();
        Tensor::from_vec(self.entries.len(), d, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(class_id: usize, c: Vec<f64>) -> CentroidEntry {
        CentroidEntry {
            centroid: c,
            class_id,
            task_id: 0,
            kind: ClassKind::Known,
            space: 0,
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_widths() {
        let mut s = CentroidStore::new();
        s.push(entry(1, vec![0.0, 1.0])).unwrap();
        assert!(matches!(s.push(entry(1, vec![0.0, 1.0])), Err(Error::State(_))));
        assert!(matches!(s.push(entry(2, vec![0.0])), Err(Error::Dimension(_))));
        assert!(s.push(entry(3, vec![f64::NAN, 0.0])).is_err());
        let id = s.allocate_cluster_id();
        assert_eq!(id, NOVEL_ID_BASE);
        assert_eq!(s.allocate_cluster_id(), NOVEL_ID_BASE + 1);
        assert_eq!(s.matrix().unwrap().shape(), &[1, 2]);
    }
}
