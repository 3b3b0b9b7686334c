//! Synthetic 2-d classification sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DkmError, Result};
use crate::matrix::DMatrix;

/// Radius of the circle the blob centers sit on.
pub const BLOB_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Moons,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x 2` points.
    pub features: DMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: DMatrix::from_vec(indices.len(), d, data).expect("sized"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// 80/20 train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
}

impl DatasetSpec {
    pub fn make(&self, seed: u64) -> Result<Split> {
        make_dataset(self.kind, self.n, self.classes, self.noise, seed)
    }
}

/// Center of blob `class` out of `classes`, evenly spaced on a circle.
pub fn blob_center(class: usize, classes: usize) -> [f64; 2] {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    [BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin()]
}

/// Deterministic synthetic dataset, shuffled and split 80/20.
///
/// Blobs are isotropic Gaussians (std `noise`) around [`blob_center`]; moons
/// are the usual two interleaved half circles and require `classes == 2`.
pub fn make_dataset(kind: DatasetKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<Split> {
    if classes < 2 {
        return Err(DkmError::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(DkmError::Parameter(format!("n = {n} is smaller than classes = {classes}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DkmError::Parameter(format!("noise must be non-negative, got {noise}")));
    }
    if kind == DatasetKind::Moons && classes != 2 {
        return Err(DkmError::Parameter("moons has exactly 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let [cx, cy] = match kind {
            DatasetKind::Blobs => blob_center(label, classes),
            DatasetKind::Moons => {
                let per_class = n.div_ceil(2).max(2) as f64;
                let t = std::f64::consts::PI * (i / 2) as f64 / (per_class - 1.0);
                if label == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
        };
        points.push(([cx + noise * gauss(), cy + noise * gauss()], label));
    }
    points.shuffle(&mut rng);

    let n_train = (n * 4) / 5;
    let build = |slice: &[([f64; 2], usize)]| Dataset {
        features: DMatrix::from_vec(slice.len(), 2, slice.iter().flat_map(|(p, _)| *p).collect()).expect("sized"),
        labels: slice.iter().map(|(_, l)| *l).collect(),
        classes,
    };
    Ok(Split { train: build(&points[..n_train]), validation: build(&points[n_train..]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_split() {
        let a = make_dataset(DatasetKind::Blobs, 100, 4, 0.5, 3).unwrap();
        let b = make_dataset(DatasetKind::Blobs, 100, 4, 0.5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.validation.len()), (80, 20));
        let c = make_dataset(DatasetKind::Blobs, 100, 4, 0.5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_blobs_sit_on_centers() {
        let s = make_dataset(DatasetKind::Blobs, 40, 4, 0.0, 1).unwrap();
        for (p, &l) in s.train.features.row_iter().zip(&s.train.labels) {
            let c = blob_center(l, 4);
            assert!((p[0] - c[0]).abs() < 1e-12 && (p[1] - c[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn moons_needs_two_classes() {
        assert!(make_dataset(DatasetKind::Moons, 100, 3, 0.1, 0).is_err());
        let s = make_dataset(DatasetKind::Moons, 100, 2, 0.1, 0).unwrap();
        assert_eq!(s.train.len() + s.validation.len(), 100);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(make_dataset(DatasetKind::Blobs, 3, 4, 0.5, 0).is_err());
        assert!(make_dataset(DatasetKind::Blobs, 30, 1, 0.5, 0).is_err());
        assert!(make_dataset(DatasetKind::Blobs, 30, 3, -1.0, 0).is_err());
    }
}
