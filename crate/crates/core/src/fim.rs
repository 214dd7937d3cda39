//! Diagonal empirical Fisher information over retain/forget partitions,
//! the per-weight forget/retain ratio, and threshold-derived weight masks.
//!
//! The diagonal entry for weight `w_i` over a dataset `D` is
//! `(1/|D|) * sum_{(y,x) in D} (d log p(y|x,w) / d w_i)^2`, computed from
//! per-sample gradients at the observed labels. Batch-mean gradients are
//! never used here: `(sum g)^2 != sum g^2`. Accumulation is always in
//! `f64` regardless of model precision.

use std::path::Path;

use serde_json::json;

use crate::autodiff::Scalar;
use crate::container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Model;

/// Epsilon guarding the ratio against zero denominators.
pub const DEFAULT_RATIO_EPSILON: f64 = 1e-12;

/// Per-flat-index mean squared log-likelihood gradient. Entries are
/// nonnegative by construction.
#[derive(Clone, Debug)]
pub struct FimDiagonal {
    values: Vec<f64>,
    pub dataset_id: String,
    pub sample_count: usize,
}

impl FimDiagonal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-flat-index ratio `r(w_i) = I_f(w_i) / I_r(w_i)` under the epsilon
/// policy. Entries are finite and nonnegative.
#[derive(Clone, Debug)]
pub struct RatioVector {
    values: Vec<f64>,
    pub epsilon: f64,
}

impl RatioVector {
    pub fn from_values(values: Vec<f64>, epsilon: f64) -> Self {
        RatioVector { values, epsilon }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// The W_f / W_r partition induced by a threshold: bit set means the
/// weight belongs to W_f (ratio strictly above gamma).
#[derive(Clone, Debug)]
pub struct WeightMask {
    bits: Vec<bool>,
    gamma: f64,
}

impl WeightMask {
    pub fn from_bits(bits: Vec<bool>, gamma: f64) -> Self {
        WeightMask { bits, gamma }
    }

    pub fn all_set(n: usize) -> Self {
        WeightMask {
            bits: vec![true; n],
            gamma: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn any_in_range(&self, start: usize, end: usize) -> bool {
        self.bits[start..end].iter().any(|&b| b)
    }

    /// |W_f|: weights selected for zero-init fine-tuning.
    pub fn forget_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// |W_r|: weights frozen during fine-tuning.
    pub fn retain_count(&self) -> usize {
        self.len() - self.forget_count()
    }

    /// Flat indices of W_f, ascending.
    pub fn forget_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Knobs for the FIM computation.
#[derive(Clone, Debug)]
pub struct FimOptions {
    /// Samples per accumulation chunk; the result is chunk-size independent
    /// up to f64 rounding.
    pub chunk_size: usize,
    /// Contiguous sample ranges processed in parallel; partial sums combine
    /// in worker-index order. 1 is the deterministic reference.
    pub workers: usize,
    /// Optional cap: use only the first `k` samples of the dataset.
    pub sample_cap: Option<usize>,
    /// Multiplies every per-sample gradient contribution (scales the FIM by
    /// the square). Exposed for the scale-calibration path and its tests.
    pub grad_scale: Option<f64>,
}

impl Default for FimOptions {
    fn default() -> Self {
        FimOptions {
            chunk_size: 32,
            workers: 1,
            sample_cap: None,
            grad_scale: None,
        }
    }
}

/// Accumulate squared per-sample gradients over `range`, chunked.
fn fim_partial<S: Scalar>(
    model: &Model<S>,
    data: &LabeledDataset<S>,
    range: std::ops::Range<usize>,
    chunk_size: usize,
    grad_scale: Option<S>,
) -> Result<Vec<f64>> {
    let n = model.param_count();
    let mut total = vec![0.0f64; n];
    let mut chunk = vec![0.0f64; n];
    let mut in_chunk = 0usize;
    for i in range {
        let x = data.sample(i);
        let y = data.label(i);
        let (_, grad) = model.log_likelihood_grad(&x, y, grad_scale)?;
        for (acc, g) in chunk.iter_mut().zip(grad.as_slice()) {
            let g = g.to_f64();
            *acc += g * g;
        }
        in_chunk += 1;
        if in_chunk == chunk_size {
            for (t, c) in total.iter_mut().zip(chunk.iter_mut()) {
                *t += *c;
                *c = 0.0;
            }
            in_chunk = 0;
        }
    }
    if in_chunk > 0 {
        for (t, c) in total.iter_mut().zip(chunk.iter()) {
            *t += *c;
        }
    }
    Ok(total)
}

/// Diagonal empirical FIM of the model over `data`.
pub fn fim_diagonal<S: Scalar>(
    model: &Model<S>,
    data: &LabeledDataset<S>,
    opts: &FimOptions,
) -> Result<FimDiagonal> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.id().to_string()));
    }
    if opts.chunk_size == 0 {
        return Err(Error::Config("fim chunk_size must be positive".into()));
    }
    let n_samples = match opts.sample_cap {
        Some(cap) => data.len().min(cap.max(1)),
        None => data.len(),
    };
    let workers = opts.workers.max(1).min(n_samples);
    let grad_scale = opts.grad_scale.map(S::from_f64);

    let mut total = vec![0.0f64; model.param_count()];
    if workers == 1 {
        total = fim_partial(model, data, 0..n_samples, opts.chunk_size, grad_scale)?;
    } else {
        // Contiguous ranges per worker; partials combined in worker order.
        let per = n_samples.div_ceil(workers);
        let partials: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let start = w * per;
                    let end = ((w + 1) * per).min(n_samples);
                    scope.spawn(move || {
                        fim_partial(model, data, start..end, opts.chunk_size, grad_scale)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fim worker")).collect()
        });
        for partial in partials {
            for (t, p) in total.iter_mut().zip(partial?) {
                *t += p;
            }
        }
    }

    let inv = 1.0 / n_samples as f64;
    for v in total.iter_mut() {
        *v *= inv;
    }
    debug_assert!(total.iter().all(|&v| v >= 0.0 && v.is_finite()));
    Ok(FimDiagonal {
        values: total,
        dataset_id: data.id().to_string(),
        sample_count: n_samples,
    })
}

/// Per-weight forget/retain information ratio.
///
/// `r_i = I_f_i / max(I_r_i, epsilon)`; when both sides are below epsilon
/// the weight is uninformative to either set and gets `r_i = 0` (kept
/// frozen by any positive threshold).
pub fn ratio(fim_forget: &FimDiagonal, fim_retain: &FimDiagonal, epsilon: f64) -> Result<RatioVector> {
    if fim_forget.len() != fim_retain.len() {
        return Err(Error::Length {
            expected: fim_forget.len(),
            actual: fim_retain.len(),
            context: "ratio operands".into(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    let values: Vec<f64> = fim_forget
        .values
        .iter()
        .zip(&fim_retain.values)
        .map(|(&f, &r)| {
            if f <= epsilon && r <= epsilon {
                0.0
            } else {
                f / r.max(epsilon)
            }
        })
        .collect();
    debug_assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
    Ok(RatioVector { values, epsilon })
}

/// W_f membership is the strict rule `r(w_i) > gamma`.
pub fn mask_from_threshold(ratio: &RatioVector, gamma: f64) -> Result<WeightMask> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be > 0, got {gamma}")));
    }
    let bits: Vec<bool> = ratio.values.iter().map(|&r| r > gamma).collect();
    Ok(WeightMask { bits, gamma })
}

/// |W_r| as a function of gamma over an ascending grid; nondecreasing by
/// construction. Rows are plot-ready `(gamma, |W_r|)`.
pub fn mask_size_curve(ratio: &RatioVector, gamma_grid: &[f64]) -> Result<Vec<(f64, usize)>> {
    if gamma_grid.is_empty() {
        return Err(Error::Config("gamma grid must be nonempty".into()));
    }
    if gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("gamma grid must be sorted ascending".into()));
    }
    gamma_grid
        .iter()
        .map(|&g| Ok((g, mask_from_threshold(ratio, g)?.retain_count())))
        .collect()
}

// ── Serialization ───────────────────────────────────────────────────

pub fn save_fim(fim: &FimDiagonal, path: &Path) -> Result<()> {
    let descriptor = json!({
        "kind": "fim-diagonal",
        "dataset_id": fim.dataset_id,
        "sample_count": fim.sample_count,
    });
    container::write(path, descriptor, &fim.values)
}

pub fn load_fim(path: &Path) -> Result<FimDiagonal> {
    let raw = container::read(path)?;
    if raw.descriptor.get("kind").and_then(|v| v.as_str()) != Some("fim-diagonal") {
        return Err(Error::Format(format!(
            "{} is not a FIM diagonal container",
            path.display()
        )));
    }
    Ok(FimDiagonal {
        values: raw.values::<f64>()?,
        dataset_id: raw
            .descriptor
            .get("dataset_id")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        sample_count: raw
            .descriptor
            .get("sample_count")
            .and_then(|v| v.as_u64())
            .unwrap_or_default() as usize,
    })
}

pub fn save_ratio(ratio: &RatioVector, path: &Path) -> Result<()> {
    let descriptor = json!({
        "kind": "ratio",
        "epsilon": ratio.epsilon,
    });
    container::write(path, descriptor, &ratio.values)
}

pub fn load_ratio(path: &Path) -> Result<RatioVector> {
    let raw = container::read(path)?;
    if raw.descriptor.get("kind").and_then(|v| v.as_str()) != Some("ratio") {
        return Err(Error::Format(format!(
            "{} is not a ratio container",
            path.display()
        )));
    }
    Ok(RatioVector {
        values: raw.values::<f64>()?,
        epsilon: raw
            .descriptor
            .get("epsilon")
            .and_then(|v| v.as_f64())
            .unwrap_or(DEFAULT_RATIO_EPSILON),
    })
}

/// Inspection CSV: `flat_index,value` rows.
pub fn write_vector_csv(values: &[f64], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 16);
    out.push_str("flat_index,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
