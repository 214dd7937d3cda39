//! Retain/forget/test partitions for the two unlearning scenarios.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::rng;

use super::LabeledDataset;

/// Which unlearning scenario produced a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    /// Forget a uniformly sampled fraction of the training set.
    Random { fraction: f64 },
    /// Forget every sample of one class.
    Class { class_index: usize },
}

impl Scenario {
    pub fn tag(&self) -> &'static str {
        match self {
            Scenario::Random { .. } => "random",
            Scenario::Class { .. } => "class",
        }
    }
}

/// The partition `{D_r, D_f, D_test}`. Retain and forget are disjoint and
/// cover the training set exactly (index-level).
pub struct DataSplit<S: Scalar> {
    pub retain: LabeledDataset<S>,
    pub forget: LabeledDataset<S>,
    pub test: LabeledDataset<S>,
    pub scenario: Scenario,
    pub seed: u64,
}

/// Forget a uniform sample (without replacement) of `round(fraction * N)`
/// training indices. Deterministic in `seed`.
pub fn split_random<S: Scalar>(
    train: &LabeledDataset<S>,
    test: LabeledDataset<S>,
    fraction: f64,
    seed: u64,
) -> Result<DataSplit<S>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "forget fraction must be in (0,1), got {fraction}"
        )));
    }
    let n = train.len();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "fraction {fraction} of {n} samples gives a degenerate forget set of {k}"
        )));
    }
    let mut rng = rng::rng_from_seed(seed);
    let forget_idx = rng::sample_indices(&mut rng, n, k);
    let mut in_forget = vec![false; n];
    for &i in &forget_idx {
        in_forget[i] = true;
    }
    let retain_idx: Vec<usize> = (0..n).filter(|&i| !in_forget[i]).collect();
    Ok(DataSplit {
        retain: train.subset(&retain_idx, format!("{}/retain", train.id())),
        forget: train.subset(&forget_idx, format!("{}/forget", train.id())),
        test,
        scenario: Scenario::Random { fraction },
        seed,
    })
}

/// Forget all (and only) samples labeled `target_class`.
pub fn split_class<S: Scalar>(
    train: &LabeledDataset<S>,
    test: LabeledDataset<S>,
    target_class: usize,
    seed: u64,
) -> Result<DataSplit<S>> {
    if target_class >= train.class_count() {
        return Err(Error::Index(format!(
            "class {target_class} out of range for {} classes",
            train.class_count()
        )));
    }
    let forget_idx: Vec<usize> = (0..train.len())
        .filter(|&i| train.label(i) == target_class)
        .collect();
    if forget_idx.is_empty() {
        return Err(Error::EmptyForget(format!(
            "class {target_class} absent from {}",
            train.id()
        )));
    }
    let retain_idx: Vec<usize> = (0..train.len())
        .filter(|&i| train.label(i) != target_class)
        .collect();
    Ok(DataSplit {
        retain: train.subset(&retain_idx, format!("{}/retain", train.id())),
        forget: train.subset(&forget_idx, format!("{}/forget", train.id())),
        test,
        scenario: Scenario::Class {
            class_index: target_class,
        },
        seed,
    })
}
