//! Datasets, file formats and two-view augmentation.

pub mod augment;
pub mod cifar;
pub mod synth;

pub use augment::{augment_image, two_views, AugmentPolicy, Augmentation};
pub use cifar::{load_cifar, load_cifar_split, parse_cifar, write_cifar, CifarVariant, Split};
pub use synth::{read_synth, synth_clusters, synth_split, write_synth};

use crate::error::{Error, Result};
use crate::numcore::{ImageShape, Matrix, Rng};

/// Shape of every example in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Channel-major image with values in `[0, 1]`.
    Image(ImageShape),
    /// Plain feature vector.
    Vector(usize),
}

impl Layout {
    pub fn len(&self) -> usize {
        match self {
            Layout::Image(s) => s.len(),
            Layout::Vector(d) => *d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    /// Secondary label carried by some formats (CIFAR-100 coarse class).
    pub coarse_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    layout: Layout,
    num_classes: usize,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(layout: Layout, num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != layout.len() {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has {} features, layout needs {}",
                    ex.features.len(),
                    layout.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::InvalidArgument(format!("example {i} label {} >= {num_classes}", ex.label)));
            }
        }
        Ok(Self { layout, num_classes, examples })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Feature rows of the selected examples.
    pub fn features(&self, idx: &[usize]) -> Matrix {
        let d = self.layout.len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.examples[i].features);
        }
        Matrix::from_vec(idx.len(), d, data).expect("layout checked at construction")
    }

    pub fn all_features(&self) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features(&idx)
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            layout: self.layout,
            num_classes: self.num_classes,
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }

    /// Deterministic split: every `k`-th example (offset `k − 1`) goes to the
    /// second set.
    pub fn split_every(&self, k: usize) -> (Dataset, Dataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, ex) in self.examples.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                b.push(ex.clone());
            } else {
                a.push(ex.clone());
            }
        }
        let make = |examples| Dataset { layout: self.layout, num_classes: self.num_classes, examples };
        (make(a), make(b))
    }
}

/// Batch index lists for one epoch. The order depends only on the data
/// stream and the epoch number; incomplete trailing batches are dropped.
pub fn epoch_batches(len: usize, batch_size: usize, data_rng: &Rng, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = data_rng.split(epoch as u64);
    let perm = rng.permutation(len);
    perm.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Two augmented views of the selected examples as `N × features` matrices.
/// Example `j` of the batch draws from its own child stream of `rng`.
pub fn augment_batch(data: &Dataset, idx: &[usize], aug: &Augmentation, rng: &Rng) -> Result<(Matrix, Matrix)> {
    let d = data.layout.len();
    let mut a = Vec::with_capacity(idx.len() * d);
    let mut b = Vec::with_capacity(idx.len() * d);
    for (j, &i) in idx.iter().enumerate() {
        let mut r = rng.split(j as u64);
        let (va, vb) = two_views(&data.examples[i], data.layout, aug, &mut r)?;
        a.extend(va.features);
        b.extend(vb.features);
    }
    Ok((Matrix::from_vec(idx.len(), d, a)?, Matrix::from_vec(idx.len(), d, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_depends_only_on_data_stream() {
        let root = Rng::new(5);
        let data = root.split(crate::numcore::rng::streams::DATA);
        let first = epoch_batches(20, 4, &data, 3);
        // drawing from an unrelated stream does not move the loader
        let mut aug = root.split(crate::numcore::rng::streams::AUGMENT);
        let _ = aug.uniform();
        assert_eq!(first, epoch_batches(20, 4, &data, 3));
        assert_eq!(first.len(), 5);
        assert_ne!(first, epoch_batches(20, 4, &data, 4));
        assert_eq!(epoch_batches(10, 4, &data, 0).len(), 2);
    }
}
