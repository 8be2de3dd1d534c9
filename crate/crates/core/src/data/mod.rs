//! IDX and CIFAR-10 binary loaders, subsetting and the 5x2 cross-validation
//! plan.

mod cifar;
mod cv;
mod idx;

pub use cifar::{encode_cifar_records, load_cifar10, load_cifar10_dir, parse_cifar_batch, CIFAR_RECORD};
pub use cv::{make_cv_plan, CvPlan, CvRun};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {len} bytes is not a whole number of {record}-byte records")]
    RecordCount { path: String, len: usize, record: usize },
    #[error("{path}: expected {expected} records, found {found}")]
    WrongRecords { path: String, expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Images in `[0, 1]`, NCHW, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: &str, split: &str, images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if images.batch() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            name: name.to_string(),
            split: split.to_string(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            split: self.split.clone(),
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `n` samples chosen by a seeded permutation, in permutation order.
    pub fn random_subset(&self, n: usize, seed: u64, label: &str) -> (Self, Vec<usize>) {
        let idx = seeded_permutation(self.len(), derive_seed(seed, label, 0));
        let idx = idx[..n.min(self.len())].to_vec();
        (self.subset(&idx), idx)
    }
}

pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed));
    idx
}

/// Predefined train and test splits of one data set.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// `$ROBUSTKIT_DATA`, else `data/` under the current directory.
pub fn data_root() -> PathBuf {
    std::env::var_os("ROBUSTKIT_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads `mnist`, `fashion-mnist` or `cifar10` from `root`.
pub fn load_named(name: &str, root: &Path) -> Result<Splits, DataError> {
    match name {
        "mnist" | "fashion-mnist" => {
            let dir = root.join(name);
            let part = |split: &str, prefix: &str| {
                let mut d = load_idx(
                    &dir.join(format!("{prefix}-images-idx3-ubyte")),
                    &dir.join(format!("{prefix}-labels-idx1-ubyte")),
                )?;
                d.name = name.to_string();
                d.split = split.to_string();
                Ok::<_, DataError>(d)
            };
            Ok(Splits {
                train: part("train", "train")?,
                test: part("test", "t10k")?,
            })
        }
        "cifar10" => load_cifar10_dir(&root.join("cifar-10-batches-bin")),
        other => Err(DataError::Io {
            path: other.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "unknown data set"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::from_fn([4, 1, 2, 2], |i| i as f32 / 16.0);
        Dataset::new("t", "train", images, vec![0, 1, 2, 1], 3).unwrap()
    }

    #[test]
    fn subset_keeps_pairs() {
        let d = tiny();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.labels, vec![2, 0]);
        assert_eq!(s.images.sample(0), d.images.sample(2));
    }

    #[test]
    fn rejects_bad_labels_and_counts() {
        let images = Tensor::zeros([2, 1, 2, 2]);
        assert!(matches!(
            Dataset::new("t", "x", images.clone(), vec![0], 2),
            Err(DataError::CountMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new("t", "x", images, vec![0, 5], 2),
            Err(DataError::LabelRange { .. })
        ));
    }

    #[test]
    fn random_subset_is_seeded() {
        let d = tiny();
        assert_eq!(d.random_subset(3, 7, "spsa").1, d.random_subset(3, 7, "spsa").1);
    }
}
