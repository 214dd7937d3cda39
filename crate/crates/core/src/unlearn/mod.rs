//! Pretraining, the two-step selective unlearning procedure, and the
//! comparison baselines (gold retrain, fine-tune, random-label,
//! zero-weights ablation), with wall-clock timing.
//!
//! The unlearning procedure: compute the FIM diagonal over the forget and
//! retain sets, threshold the per-weight ratio at gamma to pick W_f, zero
//! W_f, then fine-tune only W_f on the retain set with Adam under a cosine
//! annealing schedule. W_r weights are frozen: after the run they are
//! bitwise identical to the post-zeroing snapshot.

mod optim;

pub use optim::{cosine_anneal_lr, multistep_lr, LrSchedule, Optimizer, OptimizerKind};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::{augment_batch, DataSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::fim::{self, FimOptions, RatioVector, WeightMask};
use crate::models::{build_model, Model, ModelSpec};
use crate::rng;

/// Pretraining / gold-retrain recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Pretraining-only data augmentation; unlearning never augments.
    pub augment: Option<AugmentConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_shift: usize,
    pub flip: bool,
}

impl TrainConfig {
    /// SGD with momentum 0.9 and weight decay 5e-4, multistep decay.
    pub fn pretrain_default(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::sgd_momentum(),
            lr: 0.1,
            weight_decay: 5e-4,
            epochs,
            batch_size: 64,
            schedule: LrSchedule::Multistep {
                milestones: vec![epochs * 2 / 5, epochs * 4 / 5],
                factor: 0.2,
            },
            seed,
            augment: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Knobs for the unlearning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub gamma: f64,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub ratio_epsilon: f64,
    /// Optional cap on FIM samples per set (first k).
    pub fim_sample_cap: Option<usize>,
    pub fim_chunk_size: usize,
    pub workers: usize,
    pub seed: u64,
}

impl UnlearnConfig {
    /// Adam + cosine annealing at lr 1e-3, one fine-tune epoch.
    pub fn desk_default(gamma: f64, seed: u64) -> Self {
        UnlearnConfig {
            gamma,
            finetune_epochs: 1,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            batch_size: 64,
            ratio_epsilon: fim::DEFAULT_RATIO_EPSILON,
            fim_sample_cap: None,
            fim_chunk_size: 32,
            workers: 1,
            seed,
        }
    }

    fn fim_options(&self) -> FimOptions {
        FimOptions {
            chunk_size: self.fim_chunk_size,
            workers: self.workers,
            sample_cap: self.fim_sample_cap,
            grad_scale: None,
        }
    }
}

/// Outcome of one unlearning (or retraining) run.
pub struct UnlearnResult<S: Scalar> {
    pub model: Model<S>,
    pub mask: Option<WeightMask>,
    pub algorithm: String,
    /// Wall-clock seconds covering everything after the pretrained model is
    /// available: FIM computation, masking, and fine-tuning.
    pub seconds: f64,
    pub fim_seconds: f64,
    pub finetune_seconds: f64,
}

/// A trained model plus its per-epoch mean losses.
pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub epoch_losses: Vec<f64>,
}

/// Train a fresh model from `spec` on `data`. Deterministic for a fixed
/// seed in single-worker mode. Aborts with a diagnostic on divergence.
pub fn train<S: Scalar>(
    spec: &ModelSpec,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.id().to_string()));
    }
    let mut model = build_model::<S>(spec)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, model.param_count());
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng =
            rng::rng_from_seed(rng::derive_seed_indexed(cfg.seed, "train-shuffle", epoch as u64));
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut augment_rng =
            rng::rng_from_seed(rng::derive_seed_indexed(cfg.seed, "train-augment", epoch as u64));

        let mut epoch_loss = 0.0f64;
        for (b, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let (mut images, labels) = data.batch(batch_idx);
            if let Some(aug) = &cfg.augment {
                images = augment_batch(&images, aug.max_shift, aug.flip, &mut augment_rng);
            }
            let (loss, grads) = model.loss_grad(&images, &labels)?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            epoch_loss += loss * batch_idx.len() as f64;
            let lr = match &cfg.schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Multistep { milestones, factor } => {
                    multistep_lr(epoch, milestones, *factor, cfg.lr)
                }
                LrSchedule::Cosine => cosine_anneal_lr(step, total_steps, cfg.lr),
            };
            opt.step(model.store_mut(), &grads, lr).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, batch: b },
                other => other,
            })?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

/// Fine-tune `model` on `data` with Adam-style stepping and cosine
/// annealing, updating only masked indices when a mask is given. Returns
/// the optimizer so callers can audit moment hygiene.
pub fn masked_finetune<S: Scalar>(
    model: &mut Model<S>,
    data: &LabeledDataset<S>,
    mask: Option<&WeightMask>,
    cfg: &UnlearnConfig,
) -> Result<Optimizer<S>> {
    let mut opt = Optimizer::new(cfg.optimizer, 0.0, model.param_count());
    if cfg.finetune_epochs == 0 || mask.is_some_and(|m| m.forget_count() == 0) {
        return Ok(opt);
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.id().to_string()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.finetune_epochs * batches_per_epoch;
    let mut step = 0usize;
    for epoch in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = rng::rng_from_seed(rng::derive_seed_indexed(
            cfg.seed,
            "finetune-shuffle",
            epoch as u64,
        ));
        rng::shuffle(&mut shuffle_rng, &mut order);
        for (b, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = data.batch(batch_idx);
            let (loss, grads) = model.loss_grad(&images, &labels)?;
            if !loss.to_f64().is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let lr = cosine_anneal_lr(step, total_steps, cfg.lr);
            let stepped = match mask {
                Some(mask) => opt.masked_step(model.store_mut(), &grads, mask, lr),
                None => opt.step(model.store_mut(), &grads, lr),
            };
            stepped.map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, batch: b },
                other => other,
            })?;
            step += 1;
        }
    }
    Ok(opt)
}

/// The two-step unlearning procedure against a pretrained model.
pub fn deepclean<S: Scalar>(
    model: &Model<S>,
    split: &DataSplit<S>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult<S>> {
    let start = Instant::now();
    let opts = cfg.fim_options();
    let fim_forget = fim::fim_diagonal(model, &split.forget, &opts)?;
    let fim_retain = fim::fim_diagonal(model, &split.retain, &opts)?;
    let ratio = fim::ratio(&fim_forget, &fim_retain, cfg.ratio_epsilon)?;
    let fim_seconds = start.elapsed().as_secs_f64();
    let mut result = unlearn_with_ratio(model, split, &ratio, cfg)?;
    result.fim_seconds = fim_seconds;
    result.seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Masking + zero-init + masked fine-tune against a precomputed ratio
/// vector. The ratio does not depend on gamma, so threshold sweeps compute
/// the FIM once and call this per grid point.
pub fn unlearn_with_ratio<S: Scalar>(
    model: &Model<S>,
    split: &DataSplit<S>,
    ratio: &RatioVector,
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult<S>> {
    let start = Instant::now();
    let mask = fim::mask_from_threshold(ratio, cfg.gamma)?;
    let mut unlearned = model.clone_model();
    unlearned.apply_mask_zero(&mask)?;
    let ft_start = Instant::now();
    masked_finetune(&mut unlearned, &split.retain, Some(&mask), cfg)?;
    let finetune_seconds = ft_start.elapsed().as_secs_f64();
    Ok(UnlearnResult {
        model: unlearned,
        mask: Some(mask),
        algorithm: "deepclean".to_string(),
        seconds: start.elapsed().as_secs_f64(),
        fim_seconds: 0.0,
        finetune_seconds,
    })
}

/// Retrain from scratch on the retain set (the reference model).
pub fn gold_retrain<S: Scalar>(
    spec: &ModelSpec,
    split: &DataSplit<S>,
    cfg: &TrainConfig,
) -> Result<UnlearnResult<S>> {
    let start = Instant::now();
    let outcome = train(spec, &split.retain, cfg)?;
    Ok(UnlearnResult {
        model: outcome.model,
        mask: None,
        algorithm: "gold".to_string(),
        seconds: start.elapsed().as_secs_f64(),
        fim_seconds: 0.0,
        finetune_seconds: 0.0,
    })
}

/// Baseline: keep fine-tuning the pretrained model on the retain set
/// (full model, same lr discipline as the unlearning fine-tune).
pub fn finetune_baseline<S: Scalar>(
    model: &Model<S>,
    split: &DataSplit<S>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult<S>> {
    let start = Instant::now();
    let mut tuned = model.clone_model();
    let ft_start = Instant::now();
    masked_finetune(&mut tuned, &split.retain, None, cfg)?;
    let finetune_seconds = ft_start.elapsed().as_secs_f64();
    Ok(UnlearnResult {
        model: tuned,
        mask: None,
        algorithm: "finetune".to_string(),
        seconds: start.elapsed().as_secs_f64(),
        fim_seconds: 0.0,
        finetune_seconds,
    })
}

/// Reassign each forget-set label to a uniformly random *different* class,
/// deterministic in the config seed.
pub fn relabel_forget<S: Scalar>(
    forget: &LabeledDataset<S>,
    class_count: usize,
    seed: u64,
) -> Result<LabeledDataset<S>> {
    if class_count < 2 {
        return Err(Error::Config(
            "random relabeling needs at least 2 classes".into(),
        ));
    }
    let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "relabel"));
    let labels: Vec<usize> = forget
        .labels()
        .iter()
        .map(|&y| {
            let k = rng::next_below(&mut rng, class_count - 1);
            if k < y {
                k
            } else {
                k + 1
            }
        })
        .collect();
    forget.with_labels(labels, format!("{}/relabeled", forget.id()))
}

/// Baseline: fine-tune the full model on retain plus the incorrectly
/// relabeled forget samples.
pub fn random_label_baseline<S: Scalar>(
    model: &Model<S>,
    split: &DataSplit<S>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult<S>> {
    let start = Instant::now();
    let relabeled = relabel_forget(&split.forget, split.forget.class_count(), cfg.seed)?;
    let combined = split.retain.concat(&relabeled, "retain+relabeled")?;
    let mut tuned = model.clone_model();
    let ft_start = Instant::now();
    masked_finetune(&mut tuned, &combined, None, cfg)?;
    let finetune_seconds = ft_start.elapsed().as_secs_f64();
    Ok(UnlearnResult {
        model: tuned,
        mask: None,
        algorithm: "rl".to_string(),
        seconds: start.elapsed().as_secs_f64(),
        fim_seconds: 0.0,
        finetune_seconds,
    })
}

/// Ablation: mask and zero the selected weights but skip the fine-tune.
/// Identical to the unlearning pipeline's state before retraining.
pub fn zero_weights_ablation<S: Scalar>(
    model: &Model<S>,
    split: &DataSplit<S>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult<S>> {
    let mut cfg = cfg.clone();
    cfg.finetune_epochs = 0;
    let mut result = deepclean(model, split, &cfg)?;
    result.algorithm = "zero".to_string();
    Ok(result)
}
