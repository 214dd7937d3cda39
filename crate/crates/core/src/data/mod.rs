//! Dataset ingestion and retain/forget/test partitioning.
//!
//! Loaders produce `(N,C,H,W)` tensors scaled to `[0,1]`. Datasets are
//! immutable after load and safe to share across threads.

mod cifar;
mod idx;
mod split;
pub mod synth;

pub use cifar::load_cifar10;
pub use idx::load_mnist;
pub use split::{split_class, split_random, DataSplit, Scenario};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Images plus class labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset<S: Scalar> {
    images: Tensor<S>,
    labels: Vec<usize>,
    class_count: usize,
    id: String,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn new(
        id: impl Into<String>,
        images: Tensor<S>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be (N,C,H,W), got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::Length {
                expected: shape[0],
                actual: labels.len(),
                context: "dataset labels".into(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            id: id.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// `(C,H,W)` shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &Tensor<S> {
        &self.images
    }

    /// Copy of sample `i` as a `(C,H,W)` tensor.
    pub fn sample(&self, i: usize) -> Tensor<S> {
        let stride: usize = self.sample_shape().iter().product();
        let vals = self.images.values()[i * stride..(i + 1) * stride].to_vec();
        Tensor::from_raw(self.sample_shape().to_vec(), vals)
    }

    /// Gather samples into a `(B,C,H,W)` batch with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let stride: usize = self.sample_shape().iter().product();
        let mut vals = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            vals.extend_from_slice(&self.images.values()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_raw(shape, vals), labels)
    }

    /// New dataset holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize], id: impl Into<String>) -> Self {
        let (images, labels) = self.batch(indices);
        LabeledDataset {
            images,
            labels,
            class_count: self.class_count,
            id: id.into(),
        }
    }

    /// Desk-scale cap: keep the first `k` samples of every class, in
    /// original order. Deterministic.
    pub fn cap_per_class(&self, k: usize) -> Self {
        let mut taken = vec![0usize; self.class_count];
        let mut keep = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            if taken[label] < k {
                taken[label] += 1;
                keep.push(i);
            }
        }
        self.subset(&keep, format!("{}[cap{k}]", self.id))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Same images, different labels.
    pub fn with_labels(&self, labels: Vec<usize>, id: impl Into<String>) -> Result<Self> {
        LabeledDataset::new(id, self.images.clone(), labels, self.class_count)
    }

    /// Concatenate two datasets of identical sample shape and class count.
    pub fn concat(&self, other: &Self, id: impl Into<String>) -> Result<Self> {
        if self.sample_shape() != other.sample_shape() || self.class_count != other.class_count {
            return Err(Error::Dimension(format!(
                "cannot concat {:?}/{} classes with {:?}/{} classes",
                self.sample_shape(),
                self.class_count,
                other.sample_shape(),
                other.class_count
            )));
        }
        let mut values = self.images.values().to_vec();
        values.extend_from_slice(other.images.values());
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledDataset::new(id, Tensor::from_raw(shape, values), labels, self.class_count)
    }
}

/// Random shift (zero-padded) and optional horizontal flip, per sample.
/// Pretraining-only; unlearning always runs on the raw pixels.
pub fn augment_batch<S: Scalar>(
    batch: &Tensor<S>,
    max_shift: usize,
    flip: bool,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let src = batch.values();
    let mut out = vec![S::ZERO; src.len()];
    let span = 2 * max_shift + 1;
    for s in 0..n {
        let dy = rng::next_below(rng, span) as isize - max_shift as isize;
        let dx = rng::next_below(rng, span) as isize - max_shift as isize;
        let do_flip = flip && rng::next_below(rng, 2) == 1;
        for ci in 0..c {
            let base = (s * c + ci) * h * w;
            for y in 0..h as isize {
                let sy = y - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx0 = x - dx;
                    if sx0 < 0 || sx0 >= w as isize {
                        continue;
                    }
                    let sx = if do_flip { w as isize - 1 - sx0 } else { sx0 };
                    out[base + (y * w as isize + x) as usize] =
                        src[base + (sy * w as isize + sx) as usize];
                }
            }
        }
    }
    Tensor::from_raw(shape, out)
}
