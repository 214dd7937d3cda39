//! Optimizers with mask-aware updates, and learning-rate schedules.
//!
//! Freezing is realized as update masking: a masked step touches only W_f
//! indices, and the moment buffers of frozen indices stay exactly zero for
//! the whole fine-tune.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientVector, Scalar};
use crate::error::{Error, Result};
use crate::fim::WeightMask;
use crate::models::ParameterStore;

/// Optimizer family plus its fixed hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd_momentum() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd-momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Learning-rate schedule over a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the base rate by `factor` at each milestone epoch.
    Multistep { milestones: Vec<usize>, factor: f64 },
    /// Cosine annealing per optimizer step, from `lr0` down to 0.
    Cosine,
}

/// `lr0 * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_anneal_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    debug_assert!(step <= total_steps && total_steps > 0);
    lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0
}

/// Base rate after multistep decay for the given epoch.
pub fn multistep_lr(epoch: usize, milestones: &[usize], factor: f64, lr0: f64) -> f64 {
    let hits = milestones.iter().filter(|&&m| epoch >= m).count();
    lr0 * factor.powi(hits as i32)
}

/// Any weight beyond this magnitude is treated as divergence: inputs are
/// unit-scaled, so realistic models sit orders of magnitude below it, and
/// staying under it keeps every downstream matmul finite even in f32.
const DIVERGENCE_BOUND: f64 = 1e15;

/// Per-parameter moment buffers aligned to the flat index, plus the step
/// counter for Adam bias correction.
pub struct Optimizer<S: Scalar> {
    kind: OptimizerKind,
    weight_decay: f64,
    /// Momentum buffer (SGD) or first moment (Adam).
    m: Vec<S>,
    /// Second moment (Adam only).
    v: Vec<S>,
    step_count: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, param_count: usize) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![S::ZERO; param_count],
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            weight_decay,
            m: vec![S::ZERO; param_count],
            v,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// First and second moment buffers (second is empty for SGD).
    pub fn moments(&self) -> (&[S], &[S]) {
        (&self.m, &self.v)
    }

    /// Update every parameter.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<S>,
        grads: &GradientVector<S>,
        lr: f64,
    ) -> Result<()> {
        self.apply(store, grads, None, lr)
    }

    /// Update only W_f indices; frozen weights and their moments are left
    /// untouched bit-for-bit.
    pub fn masked_step(
        &mut self,
        store: &mut ParameterStore<S>,
        grads: &GradientVector<S>,
        mask: &WeightMask,
        lr: f64,
    ) -> Result<()> {
        self.apply(store, grads, Some(mask), lr)
    }

    fn apply(
        &mut self,
        store: &mut ParameterStore<S>,
        grads: &GradientVector<S>,
        mask: Option<&WeightMask>,
        lr: f64,
    ) -> Result<()> {
        let n = store.len();
        if grads.len() != n {
            return Err(Error::Length {
                expected: n,
                actual: grads.len(),
                context: "optimizer gradients".into(),
            });
        }
        if self.m.len() != n {
            return Err(Error::Length {
                expected: n,
                actual: self.m.len(),
                context: "optimizer moments".into(),
            });
        }
        if let Some(mask) = mask {
            if mask.len() != n {
                return Err(Error::Length {
                    expected: n,
                    actual: mask.len(),
                    context: "optimizer mask".into(),
                });
            }
        }
        self.step_count += 1;
        let g = grads.as_slice();
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(self.weight_decay);
        let use_wd = self.weight_decay != 0.0;
        // Divergence can overflow downstream ops while the (stable) loss is
        // still finite, so the updated values themselves are checked.
        let mut finite = true;
        let bound = S::from_f64(DIVERGENCE_BOUND);

        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = S::from_f64(momentum);
                store.for_each_param_mut(|offset, values| {
                    for (j, w) in values.iter_mut().enumerate() {
                        let i = offset + j;
                        if mask.map_or(false, |m| !m.is_set(i)) {
                            continue;
                        }
                        let mut gi = g[i];
                        if use_wd {
                            gi += wd * *w;
                        }
                        self.m[i] = mu * self.m[i] + gi;
                        *w -= lr_s * self.m[i];
                        finite &= w.is_finite() && w.abs() <= bound;
                    }
                });
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let b1 = S::from_f64(beta1);
                let b2 = S::from_f64(beta2);
                let eps = S::from_f64(eps);
                let one = S::ONE;
                let bc1 = S::from_f64(1.0 - beta1.powi(self.step_count as i32));
                let bc2 = S::from_f64(1.0 - beta2.powi(self.step_count as i32));
                store.for_each_param_mut(|offset, values| {
                    for (j, w) in values.iter_mut().enumerate() {
                        let i = offset + j;
                        if mask.map_or(false, |m| !m.is_set(i)) {
                            continue;
                        }
                        let mut gi = g[i];
                        if use_wd {
                            gi += wd * *w;
                        }
                        self.m[i] = b1 * self.m[i] + (one - b1) * gi;
                        self.v[i] = b2 * self.v[i] + (one - b2) * gi * gi;
                        let m_hat = self.m[i] / bc1;
                        let v_hat = self.v[i] / bc2;
                        *w -= lr_s * m_hat / (v_hat.sqrt() + eps);
                        finite &= w.is_finite() && w.abs() <= bound;
                    }
                });
            }
        }
        if !finite {
            return Err(Error::NonFinite(
                "parameter out of range after optimizer step".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};

    fn tiny_model() -> crate::models::Model<f64> {
        build_model::<f64>(&ModelSpec::mlp(&[2], &[3], 2, 4)).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_anneal_lr(0, 10, 1e-3), 1e-3);
        assert!(cosine_anneal_lr(10, 10, 1e-3).abs() < 1e-19);
        assert!((cosine_anneal_lr(5, 10, 1e-3) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn multistep_decays_at_milestones() {
        let milestones = [3, 5];
        assert_eq!(multistep_lr(0, &milestones, 0.2, 0.1), 0.1);
        assert_eq!(multistep_lr(3, &milestones, 0.2, 0.1), 0.1 * 0.2);
        assert!((multistep_lr(5, &milestones, 0.2, 0.1) - 0.1 * 0.04).abs() < 1e-18);
    }

    #[test]
    fn all_false_mask_changes_nothing() {
        let mut model = tiny_model();
        let n = model.param_count();
        let before = model.store().flat_values();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0, n);
        let grads = GradientVector::new(vec![1.0; n]);
        let mask = WeightMask::from_bits(vec![false; n], 1.0);
        opt.masked_step(model.store_mut(), &grads, &mask, 1e-2).unwrap();
        assert_eq!(model.store().flat_values(), before);
        assert!(opt.moments().0.iter().all(|&m| m == 0.0));
        assert!(opt.moments().1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_index_mask_changes_exactly_one_scalar() {
        let mut model = tiny_model();
        let n = model.param_count();
        let before = model.store().flat_values();
        let mut opt = Optimizer::new(OptimizerKind::sgd_momentum(), 0.0, n);
        let grads = GradientVector::new(vec![1.0; n]);
        let mut bits = vec![false; n];
        bits[4] = true;
        let mask = WeightMask::from_bits(bits, 1.0);
        opt.masked_step(model.store_mut(), &grads, &mask, 0.5).unwrap();
        let after = model.store().flat_values();
        let changed: Vec<usize> = (0..n).filter(|&i| after[i] != before[i]).collect();
        assert_eq!(changed, vec![4]);
        assert!((after[4] - (before[4] - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_hand_computed_scalar_update() {
        // One parameter, one step: m = 0.1g, v = 0.001g^2,
        // m_hat = g, v_hat = g^2, w -= lr * g / (|g| + eps).
        let mut model = tiny_model();
        let n = model.param_count();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0, n);
        let g0 = 0.37;
        let mut gvals = vec![0.0; n];
        gvals[0] = g0;
        let grads = GradientVector::new(gvals);
        let mut bits = vec![false; n];
        bits[0] = true;
        let mask = WeightMask::from_bits(bits, 1.0);
        let w0 = model.store().get_flat(0).unwrap();
        opt.masked_step(model.store_mut(), &grads, &mask, 1e-3).unwrap();

        let m = 0.1 * g0;
        let v = 0.001 * g0 * g0;
        let m_hat = m / 0.1;
        let v_hat = v / 0.001;
        let expected = w0 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = model.store().get_flat(0).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut model = tiny_model();
        let n = model.param_count();
        let mut opt = Optimizer::new(OptimizerKind::sgd_momentum(), 0.0, n);
        let grads = GradientVector::new(vec![1.0; n]);
        let w0 = model.store().get_flat(0).unwrap();
        opt.step(model.store_mut(), &grads, 0.1).unwrap();
        opt.step(model.store_mut(), &grads, 0.1).unwrap();
        // buf: 1 then 1.9; w = w0 - 0.1*(1 + 1.9)
        let got = model.store().get_flat(0).unwrap();
        assert!((got - (w0 - 0.29)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut model = tiny_model();
        let n = model.param_count();
        model.store_mut().set_flat(0, 1.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, 0.1, n);
        let grads = GradientVector::zeros(n);
        opt.step(model.store_mut(), &grads, 0.5).unwrap();
        // g = 0 + 0.1*1.0; w = 1 - 0.5*0.1
        assert!((model.store().get_flat(0).unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut model = tiny_model();
        let n = model.param_count();
        let before = model.store().flat_values();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0, n);
        let grads = GradientVector::new(vec![0.5; n]);
        opt.step(model.store_mut(), &grads, 0.0).unwrap();
        assert_eq!(model.store().flat_values(), before);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut model = tiny_model();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0, model.param_count());
        let grads = GradientVector::new(vec![0.0; 3]);
        assert!(matches!(
            opt.step(model.store_mut(), &grads, 0.1),
            Err(Error::Length { .. })
        ));
    }
}
