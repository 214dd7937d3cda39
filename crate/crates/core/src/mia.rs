//! Membership-inference evaluation: a linear logistic regression over
//! per-sample model-output features.
//!
//! The attack is shadow-free: members are retain-set samples (data the
//! evaluated model legitimately trained on), nonmembers are test samples.
//! The fitted classifier is then applied to the forget set; the reported
//! score is the percentage of forget samples it still calls "member".

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::{DataSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;

const FEATURE_DIM: usize = 3;

/// Per-sample attack features, all derived from the model's output
/// distribution at the observed label.
#[derive(Clone, Copy, Debug)]
pub struct AttackFeatures {
    /// Cross-entropy loss, >= 0.
    pub loss: f64,
    /// Max softmax probability, in (0, 1].
    pub max_prob: f64,
    /// Prediction entropy, in [0, ln c].
    pub entropy: f64,
}

impl AttackFeatures {
    fn as_array(&self) -> [f64; FEATURE_DIM] {
        [self.loss, self.max_prob, self.entropy]
    }
}

/// Deterministic per-sample feature extraction.
pub fn extract_features<S: Scalar>(
    model: &crate::models::Model<S>,
    data: &LabeledDataset<S>,
) -> Result<Vec<AttackFeatures>> {
    if data.class_count() != model.spec().class_count {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, model {}",
            data.class_count(),
            model.spec().class_count
        )));
    }
    let c = data.class_count();
    let mut features = Vec::with_capacity(data.len());
    let chunk = 256usize;
    let mut idx: Vec<usize> = Vec::with_capacity(chunk);
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        idx.clear();
        idx.extend(start..end);
        let (images, labels) = data.batch(&idx);
        let lp = model.log_probs(&images)?;
        for (row, &y) in lp.values().chunks_exact(c).zip(&labels) {
            let loss = (-row[y].to_f64()).max(0.0);
            let mut max_lp = row[0].to_f64();
            let mut entropy = 0.0;
            for v in row {
                let logp = v.to_f64();
                max_lp = max_lp.max(logp);
                let p = logp.exp();
                if p > 0.0 {
                    entropy -= p * logp;
                }
            }
            features.push(AttackFeatures {
                loss,
                max_prob: max_lp.exp(),
                entropy: entropy.max(0.0),
            });
        }
        start = end;
    }
    Ok(features)
}

/// Attack-classifier training knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub lr: f64,
    pub iterations: usize,
    pub l2: f64,
    /// Fraction of each class held out for validation accuracy.
    pub val_fraction: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn with_seed(seed: u64) -> Self {
        AttackConfig {
            lr: 0.5,
            iterations: 400,
            l2: 1e-4,
            val_fraction: 0.2,
            seed,
        }
    }
}

/// Fitted linear logistic regression plus the feature standardization
/// computed from its training folds.
#[derive(Clone, Debug)]
pub struct LogisticModel {
    weights: [f64; FEATURE_DIM],
    bias: f64,
    mean: [f64; FEATURE_DIM],
    std: [f64; FEATURE_DIM],
    /// Held-out member/nonmember classification accuracy.
    pub val_accuracy: f64,
}

impl LogisticModel {
    fn standardize(&self, f: &AttackFeatures) -> [f64; FEATURE_DIM] {
        let raw = f.as_array();
        std::array::from_fn(|i| (raw[i] - self.mean[i]) / self.std[i])
    }

    /// Probability that a sample was a training member.
    pub fn member_probability(&self, f: &AttackFeatures) -> f64 {
        let x = self.standardize(f);
        let z: f64 = self
            .weights
            .iter()
            .zip(&x)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + self.bias;
        sigmoid(z)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean log-loss with L2 on the weights, and its gradient.
fn logistic_loss_grad(
    xs: &[[f64; FEATURE_DIM]],
    ys: &[f64],
    weights: &[f64; FEATURE_DIM],
    bias: f64,
    l2: f64,
) -> (f64, [f64; FEATURE_DIM], f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = [0.0; FEATURE_DIM];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias;
        let p = sigmoid(z);
        // Numerically safe log-loss via log1p of the exponent.
        loss += if z >= 0.0 {
            (1.0 - y) * z + (-z).exp().ln_1p()
        } else {
            -y * z + z.exp().ln_1p()
        };
        let d = p - y;
        for (g, v) in gw.iter_mut().zip(x) {
            *g += d * v;
        }
        gb += d;
    }
    loss /= n;
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
        loss += 0.5 * l2 * w * w;
    }
    gb /= n;
    (loss, gw, gb)
}

/// Fit the membership classifier on member vs nonmember features.
///
/// Classes are balanced by seeded subsampling to the smaller size, split
/// into train/validation folds, standardized on the training folds, and
/// fit with full-batch gradient descent on L2-regularized log-loss.
pub fn train_attack(
    member: &[AttackFeatures],
    nonmember: &[AttackFeatures],
    cfg: &AttackConfig,
) -> Result<LogisticModel> {
    if member.is_empty() || nonmember.is_empty() {
        return Err(Error::Config(
            "attack training needs both member and nonmember features".into(),
        ));
    }
    let m = member.len().min(nonmember.len());
    if m < 5 {
        return Err(Error::Config(format!(
            "attack training needs >= 5 samples per class, got {m}"
        )));
    }
    let mut rng = rng::rng_from_seed(rng::derive_seed(cfg.seed, "mia-subsample"));
    let pick = |rng: &mut _, pool: &[AttackFeatures]| -> Vec<AttackFeatures> {
        let idx = rng::sample_indices(rng, pool.len(), m);
        idx.into_iter().map(|i| pool[i]).collect()
    };
    let members = pick(&mut rng, member);
    let nonmembers = pick(&mut rng, nonmember);

    let val_n = ((m as f64) * cfg.val_fraction).round().max(1.0) as usize;
    let val_n = val_n.min(m - 1);
    // Train folds first, validation folds at the tail of each class.
    let split = |v: &[AttackFeatures]| -> (Vec<AttackFeatures>, Vec<AttackFeatures>) {
        (v[..m - val_n].to_vec(), v[m - val_n..].to_vec())
    };
    let (m_train, m_val) = split(&members);
    let (n_train, n_val) = split(&nonmembers);

    // Standardization from training folds only.
    let mut mean = [0.0f64; FEATURE_DIM];
    let mut var = [0.0f64; FEATURE_DIM];
    let train_count = (m_train.len() + n_train.len()) as f64;
    for f in m_train.iter().chain(&n_train) {
        for (acc, v) in mean.iter_mut().zip(f.as_array()) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= train_count;
    }
    for f in m_train.iter().chain(&n_train) {
        for ((acc, v), mu) in var.iter_mut().zip(f.as_array()).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std: [f64; FEATURE_DIM] =
        std::array::from_fn(|i| {
            let s = (var[i] / train_count).sqrt();
            // Constant features carry no signal; unit scale keeps them inert.
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        });

    let mut model = LogisticModel {
        weights: [0.0; FEATURE_DIM],
        bias: 0.0,
        mean,
        std,
        val_accuracy: 0.0,
    };

    let mut xs: Vec<[f64; FEATURE_DIM]> = Vec::with_capacity(m_train.len() + n_train.len());
    let mut ys: Vec<f64> = Vec::with_capacity(xs.capacity());
    for f in &m_train {
        xs.push(model.standardize(f));
        ys.push(1.0);
    }
    for f in &n_train {
        xs.push(model.standardize(f));
        ys.push(0.0);
    }

    for _ in 0..cfg.iterations {
        let (_, gw, gb) = logistic_loss_grad(&xs, &ys, &model.weights, model.bias, cfg.l2);
        for (w, g) in model.weights.iter_mut().zip(gw) {
            *w -= cfg.lr * g;
        }
        model.bias -= cfg.lr * gb;
    }

    let mut correct = 0usize;
    for f in &m_val {
        if model.member_probability(f) > 0.5 {
            correct += 1;
        }
    }
    for f in &n_val {
        if model.member_probability(f) <= 0.5 {
            correct += 1;
        }
    }
    model.val_accuracy = 100.0 * correct as f64 / (m_val.len() + n_val.len()) as f64;
    Ok(model)
}

/// Outcome of scoring a forget set with a fitted attack.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MiaResult {
    /// Percent of forget samples classified as training members.
    pub mia_percent: f64,
    pub attack_val_accuracy: f64,
}

/// Percent of `forget` samples the attack classifies as members.
pub fn mia_score<S: Scalar>(
    attack: &LogisticModel,
    model: &crate::models::Model<S>,
    forget: &LabeledDataset<S>,
) -> Result<MiaResult> {
    let features = extract_features(model, forget)?;
    let members = features
        .iter()
        .filter(|f| attack.member_probability(f) > 0.5)
        .count();
    let mia_percent = 100.0 * members as f64 / features.len().max(1) as f64;
    debug_assert!((0.0..=100.0).contains(&mia_percent));
    Ok(MiaResult {
        mia_percent,
        attack_val_accuracy: attack.val_accuracy,
    })
}

/// Full protocol for one model: fit members (retain) vs nonmembers (test),
/// score the forget set.
pub fn run_mia<S: Scalar>(
    model: &crate::models::Model<S>,
    split: &DataSplit<S>,
    cfg: &AttackConfig,
) -> Result<MiaResult> {
    let member = extract_features(model, &split.retain)?;
    let nonmember = extract_features(model, &split.test)?;
    let attack = train_attack(&member, &nonmember, cfg)?;
    mia_score(&attack, model, &split.forget)
}

/// Synthetic feature generators for harness validation.
pub mod synthetic {
    use super::AttackFeatures;
    use crate::rng;

    /// Linearly separable benchmark: members sit at high loss-offset, or
    /// rather, the two classes are separated along the loss feature.
    pub fn separable(n: usize, member: bool, seed: u64) -> Vec<AttackFeatures> {
        let mut rng = rng::rng_from_seed(seed);
        let center = if member { 0.25 } else { 2.0 };
        (0..n)
            .map(|_| AttackFeatures {
                loss: center + rng::next_uniform_f64(&mut rng, -0.2, 0.2),
                max_prob: 0.5,
                entropy: 0.5,
            })
            .collect()
    }

    /// Null benchmark: both classes drawn from one distribution.
    pub fn null(n: usize, seed: u64) -> Vec<AttackFeatures> {
        let mut rng = rng::rng_from_seed(seed);
        (0..n)
            .map(|_| AttackFeatures {
                loss: rng::next_uniform_f64(&mut rng, 0.0, 2.0),
                max_prob: rng::next_uniform_f64(&mut rng, 0.1, 1.0),
                entropy: rng::next_uniform_f64(&mut rng, 0.0, 2.0),
            })
            .collect()
    }
}
