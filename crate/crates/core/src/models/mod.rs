//! Model definitions (MLP, small CNN), the parameter registry with its
//! canonical global flat index, and mask-aware parameter mutation.
//!
//! Every trainable scalar has one fixed flat index: parameters are laid out
//! in layer declaration order, weights before biases, and the index is
//! stable across checkpoint round-trips. FIM diagnostics, masks, optimizer
//! state, and checkpoints all speak this index.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientVector, NodeId, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fim::WeightMask;
use crate::rng;

/// Architecture family. Desk-scale stand-ins: the unlearning algorithm
/// itself is architecture-agnostic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum Architecture {
    /// Fully-connected net with ReLU between layers.
    Mlp { hidden: Vec<usize> },
    /// conv(kernel, stride 1, pad kernel/2) + relu + maxpool(pool) per
    /// channel entry, then a dense head.
    SmallCnn {
        channels: Vec<usize>,
        kernel: usize,
        pool: usize,
    },
}

/// Everything needed to rebuild a model deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub arch: Architecture,
    /// Sample shape, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn mlp(input_shape: &[usize], hidden: &[usize], class_count: usize, init_seed: u64) -> Self {
        ModelSpec {
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: input_shape.to_vec(),
            class_count,
            init_seed,
        }
    }

    pub fn small_cnn(
        input_shape: &[usize],
        channels: &[usize],
        class_count: usize,
        init_seed: u64,
    ) -> Self {
        ModelSpec {
            arch: Architecture::SmallCnn {
                channels: channels.to_vec(),
                kernel: 3,
                pool: 2,
            },
            input_shape: input_shape.to_vec(),
            class_count,
            init_seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn arch_tag(&self) -> &'static str {
        match self.arch {
            Architecture::Mlp { .. } => "mlp",
            Architecture::SmallCnn { .. } => "small-cnn",
        }
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config("zero-width hidden layer".into()));
                }
            }
            Architecture::SmallCnn {
                channels,
                kernel,
                pool,
            } => {
                if channels.is_empty() || channels.iter().any(|&c| c == 0) {
                    return Err(Error::Config(format!("invalid channels {channels:?}")));
                }
                if *kernel == 0 || *pool == 0 {
                    return Err(Error::Config("kernel and pool must be positive".into()));
                }
                if self.input_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "small-cnn needs a (C,H,W) input shape, got {:?}",
                        self.input_shape
                    )));
                }
            }
        }
        Ok(())
    }
}

struct NamedParam<S: Scalar> {
    name: String,
    tensor: Tensor<S>,
}

/// All trainable weights, with the canonical flat index
/// `w_i -> (param, offset)`.
pub struct ParameterStore<S: Scalar> {
    params: Vec<NamedParam<S>>,
    /// Prefix offsets; `offsets[i]` is the flat index of `params[i][0]`.
    offsets: Vec<usize>,
    total: usize,
}

impl<S: Scalar> ParameterStore<S> {
    fn from_tensors(named: Vec<(String, Tensor<S>)>) -> Self {
        let mut params = Vec::with_capacity(named.len());
        let mut offsets = Vec::with_capacity(named.len());
        let mut total = 0;
        for (name, tensor) in named {
            offsets.push(total);
            total += tensor.numel();
            params.push(NamedParam {
                name,
                tensor: tensor.with_requires_grad(true),
            });
        }
        ParameterStore {
            params,
            offsets,
            total,
        }
    }

    /// Total trainable parameter count `n`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.params[i].name
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.params[i].tensor
    }

    /// Map a flat index to `(param index, offset within param)`.
    pub fn locate(&self, flat: usize) -> Result<(usize, usize)> {
        if flat >= self.total {
            return Err(Error::Index(format!(
                "flat index {flat} out of range (n = {})",
                self.total
            )));
        }
        let i = match self.offsets.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        Ok((i, flat - self.offsets[i]))
    }

    pub fn get_flat(&self, flat: usize) -> Result<S> {
        let (i, off) = self.locate(flat)?;
        Ok(self.params[i].tensor.values()[off])
    }

    pub fn set_flat(&mut self, flat: usize, v: S) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("set_flat({flat})")));
        }
        let (i, off) = self.locate(flat)?;
        self.params[i].tensor.values_mut()[off] = v;
        Ok(())
    }

    /// Copy of all values in flat-index order.
    pub fn flat_values(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total);
        for p in &self.params {
            out.extend_from_slice(p.tensor.values());
        }
        out
    }

    /// Overwrite all values from a flat slice.
    pub fn load_flat(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.total {
            return Err(Error::Length {
                expected: self.total,
                actual: values.len(),
                context: "load_flat".into(),
            });
        }
        for (p, offset) in self.params.iter_mut().zip(&self.offsets) {
            let n = p.tensor.numel();
            p.tensor
                .values_mut()
                .copy_from_slice(&values[*offset..offset + n]);
        }
        Ok(())
    }

    /// Apply `f(flat_index, current) -> new` to every masked/selected index.
    pub fn update_indices<F: FnMut(usize, S) -> S>(&mut self, indices: &[usize], mut f: F) {
        for &flat in indices {
            let (i, off) = self.locate(flat).expect("index validated by caller");
            let slot = &mut self.params[i].tensor.values_mut()[off];
            *slot = f(flat, *slot);
        }
    }

    /// Visit every parameter's values mutably, with the flat-index offset
    /// of its first scalar.
    pub fn for_each_param_mut<F: FnMut(usize, &mut [S])>(&mut self, mut f: F) {
        for (p, offset) in self.params.iter_mut().zip(&self.offsets) {
            f(*offset, p.tensor.values_mut().as_mut_slice());
        }
    }
}

/// The input/output nodes of one linear layer: `z = x @ W` (bias follows).
#[derive(Copy, Clone, Debug)]
pub struct LinearTap {
    pub x: NodeId,
    pub z: NodeId,
}

/// Handles produced by binding a model's forward graph onto a tape.
pub struct ForwardPass {
    pub logits: NodeId,
    pub input: NodeId,
    param_nodes: Vec<NodeId>,
    /// One entry per dense layer, in parameter order. Lets per-sample
    /// gradient statistics be read off a single batched backward pass.
    pub linear_taps: Vec<LinearTap>,
}

/// A model: spec + parameter store.
pub struct Model<S: Scalar> {
    spec: ModelSpec,
    store: ParameterStore<S>,
}

/// Build a model with fan-in-scaled uniform init, deterministic in
/// `spec.init_seed`.
pub fn build_model<S: Scalar>(spec: &ModelSpec) -> Result<Model<S>> {
    spec.validate()?;
    let mut rng = rng::rng_from_seed(spec.init_seed);
    let mut named: Vec<(String, Tensor<S>)> = Vec::new();
    let mut init = |shape: &[usize], fan_in: usize| -> Tensor<S> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<S> = (0..n)
            .map(|_| S::from_f64(rng::next_uniform_f64(&mut rng, -bound, bound)))
            .collect();
        Tensor::from_raw(shape.to_vec(), values)
    };

    match &spec.arch {
        Architecture::Mlp { hidden } => {
            let mut widths = vec![spec.input_len()];
            widths.extend_from_slice(hidden);
            widths.push(spec.class_count);
            for l in 0..widths.len() - 1 {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                named.push((format!("fc{l}.weight"), init(&[fan_in, fan_out], fan_in)));
                named.push((format!("fc{l}.bias"), init(&[fan_out], fan_in)));
            }
        }
        Architecture::SmallCnn {
            channels,
            kernel,
            pool,
        } => {
            let (mut c, mut h, mut w) = (
                spec.input_shape[0],
                spec.input_shape[1],
                spec.input_shape[2],
            );
            let pad = kernel / 2;
            for (l, &c_out) in channels.iter().enumerate() {
                let fan_in = c * kernel * kernel;
                named.push((
                    format!("conv{l}.weight"),
                    init(&[c_out, c, *kernel, *kernel], fan_in),
                ));
                named.push((format!("conv{l}.bias"), init(&[c_out], fan_in)));
                c = c_out;
                h = (h + 2 * pad - kernel) / 1 + 1;
                w = (w + 2 * pad - kernel) / 1 + 1;
                if h < *pool || w < *pool {
                    return Err(Error::Config(format!(
                        "feature map {h}x{w} smaller than pool window at conv{l}"
                    )));
                }
                h = (h - pool) / pool + 1;
                w = (w - pool) / pool + 1;
            }
            let dense_in = c * h * w;
            named.push((
                "head.weight".to_string(),
                init(&[dense_in, spec.class_count], dense_in),
            ));
            named.push(("head.bias".to_string(), init(&[spec.class_count], dense_in)));
        }
    }

    Ok(Model {
        spec: spec.clone(),
        store: ParameterStore::from_tensors(named),
    })
}

impl<S: Scalar> Model<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    /// Rebuild with the same spec but different parameter values.
    pub(crate) fn from_parts(spec: ModelSpec, flat: &[S]) -> Result<Self> {
        let mut model = build_model::<S>(&spec)?;
        model.store.load_flat(flat)?;
        Ok(model)
    }

    /// Deep copy (storage is unshared on first mutation anyway).
    pub fn clone_model(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            store: ParameterStore {
                params: self
                    .store
                    .params
                    .iter()
                    .map(|p| NamedParam {
                        name: p.name.clone(),
                        tensor: p.tensor.clone(),
                    })
                    .collect(),
                offsets: self.store.offsets.clone(),
                total: self.store.total,
            },
        }
    }

    fn batchify(&self, batch: &Tensor<S>) -> Result<(Tensor<S>, usize)> {
        let sample = &self.spec.input_shape;
        let shape = batch.shape();
        if shape == sample.as_slice() {
            let mut with_batch = vec![1];
            with_batch.extend_from_slice(sample);
            return Ok((batch.reshaped(&with_batch)?, 1));
        }
        if shape.len() == sample.len() + 1 && &shape[1..] == sample.as_slice() {
            return Ok((batch.clone(), shape[0]));
        }
        // MLP also accepts pre-flattened (B, input_len).
        if matches!(self.spec.arch, Architecture::Mlp { .. })
            && shape.len() == 2
            && shape[1] == self.spec.input_len()
        {
            return Ok((batch.clone(), shape[0]));
        }
        Err(Error::Dimension(format!(
            "batch shape {:?} does not match model input {:?}",
            shape, sample
        )))
    }

    /// Register parameters and the batch on `tape` and build the forward
    /// graph up to the logits `(B, class_count)`.
    pub fn forward_on_tape(&self, tape: &mut Tape<S>, batch: &Tensor<S>) -> Result<ForwardPass> {
        let (batch, b) = self.batchify(batch)?;
        let param_nodes: Vec<NodeId> = self
            .store
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect();
        let input = tape.leaf(batch);

        let logits = match &self.spec.arch {
            Architecture::Mlp { hidden } => {
                let mut x = tape.reshape(input, &[b, self.spec.input_len()])?;
                let layers = hidden.len() + 1;
                for l in 0..layers {
                    let z = tape.matmul(x, param_nodes[2 * l])?;
                    x = tape.add_bias(z, param_nodes[2 * l + 1])?;
                    if l + 1 < layers {
                        x = tape.relu(x);
                    }
                }
                x
            }
            Architecture::SmallCnn { channels, pool, kernel } => {
                let pad = kernel / 2;
                let mut x = input;
                for l in 0..channels.len() {
                    let z = tape.conv2d(x, param_nodes[2 * l], 1, pad)?;
                    let z = tape.add_bias(z, param_nodes[2 * l + 1])?;
                    let z = tape.relu(z);
                    x = tape.maxpool2d(z, *pool, *pool)?;
                }
                let flat = tape.flatten(x)?;
                let head = channels.len();
                let z = tape.matmul(flat, param_nodes[2 * head])?;
                tape.add_bias(z, param_nodes[2 * head + 1])?
            }
        };
        Ok(ForwardPass {
            logits,
            input,
            param_nodes,
        })
    }

    /// Forward pass returning the logits tensor `(B, class_count)`.
    pub fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Log-probabilities `log p(y|x,w)` for a batch, `(B, class_count)`.
    pub fn log_probs(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch)?;
        let lp = tape.log_softmax(pass.logits)?;
        Ok(tape.value(lp).clone())
    }

    /// Log-likelihood of one observed sample.
    pub fn log_likelihood(&self, x: &Tensor<S>, y: usize) -> Result<S> {
        Ok(self.log_likelihood_grad(x, y, None)?.0)
    }

    /// Log-likelihood of one sample plus its gradient wrt every parameter.
    /// `scale` multiplies the log-likelihood (and hence the gradient).
    pub fn log_likelihood_grad(
        &self,
        x: &Tensor<S>,
        y: usize,
        scale: Option<S>,
    ) -> Result<(S, GradientVector<S>)> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, x)?;
        let lp = tape.log_softmax(pass.logits)?;
        let nll = tape.nll_loss(lp, &[y], true)?;
        let mut loglik = tape.neg(nll);
        if let Some(c) = scale {
            loglik = tape.scale(loglik, c);
        }
        let grads = tape.backward(loglik)?;
        let flat = collect_gradient(&self.store, &tape, &grads, &pass.param_nodes);
        Ok((tape.value(loglik).item()?, flat))
    }

    /// Mean cross-entropy over a batch plus its gradient.
    pub fn loss_grad(&self, batch: &Tensor<S>, labels: &[usize]) -> Result<(S, GradientVector<S>)> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch)?;
        let lp = tape.log_softmax(pass.logits)?;
        let loss = tape.nll_loss(lp, labels, true)?;
        let grads = tape.backward(loss)?;
        let flat = collect_gradient(&self.store, &tape, &grads, &pass.param_nodes);
        Ok((tape.value(loss).item()?, flat))
    }

    /// Mean cross-entropy over a batch (no gradient).
    pub fn loss(&self, batch: &Tensor<S>, labels: &[usize]) -> Result<S> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch)?;
        let lp = tape.log_softmax(pass.logits)?;
        let loss = tape.nll_loss(lp, labels, true)?;
        tape.value(loss).item()
    }

    /// Set every masked (W_f) weight to exactly zero; all other weights are
    /// untouched bit-for-bit.
    pub fn apply_mask_zero(&mut self, mask: &WeightMask) -> Result<()> {
        if mask.len() != self.store.len() {
            return Err(Error::Length {
                expected: self.store.len(),
                actual: mask.len(),
                context: "apply_mask_zero".into(),
            });
        }
        let mut flat = 0usize;
        for p in self.store.params.iter_mut() {
            let n = p.tensor.numel();
            // Only materialize a mutable copy if this param has masked bits.
            if mask.any_in_range(flat, flat + n) {
                let vals = p.tensor.values_mut();
                for (off, v) in vals.iter_mut().enumerate() {
                    if mask.is_set(flat + off) {
                        *v = S::ZERO;
                    }
                }
            }
            flat += n;
        }
        Ok(())
    }
}

/// Assemble leaf gradients into the canonical flat order. Parameters the
/// root never touched contribute zeros.
fn collect_gradient<S: Scalar>(
    store: &ParameterStore<S>,
    tape: &Tape<S>,
    grads: &crate::autodiff::Gradients<S>,
    param_nodes: &[NodeId],
) -> GradientVector<S> {
    let mut flat = Vec::with_capacity(store.len());
    for (i, node) in param_nodes.iter().enumerate() {
        match grads.get(*node) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(std::iter::repeat(S::ZERO).take(store.tensor(i).numel())),
        }
    }
    debug_assert_eq!(flat.len(), store.len());
    debug_assert_eq!(tape.len() >= param_nodes.len(), true);
    GradientVector::new(flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_mlp_spec(seed: u64) -> ModelSpec {
        ModelSpec::mlp(&[1, 28, 28], &[128], 10, seed)
    }

    #[test]
    fn mlp_parameter_count_is_101770() {
        let model = build_model::<f32>(&mnist_mlp_spec(1)).unwrap();
        assert_eq!(model.param_count(), 784 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(model.param_count(), 101_770);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let a = build_model::<f32>(&mnist_mlp_spec(7)).unwrap();
        let b = build_model::<f32>(&mnist_mlp_spec(7)).unwrap();
        assert_eq!(a.store().flat_values(), b.store().flat_values());
        let c = build_model::<f32>(&mnist_mlp_spec(8)).unwrap();
        assert_ne!(a.store().flat_values(), c.store().flat_values());
    }

    #[test]
    fn small_cnn_produces_ten_logits() {
        let spec = ModelSpec::small_cnn(&[1, 28, 28], &[4, 8], 10, 3);
        let model = build_model::<f32>(&spec).unwrap();
        let x = Tensor::zeros(&[1, 1, 28, 28]);
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
    }

    #[test]
    fn forward_batch_of_one_and_duplicated_rows() {
        let spec = ModelSpec::mlp(&[4], &[5], 3, 11);
        let model = build_model::<f64>(&spec).unwrap();
        let x = Tensor::new(&[1, 4], vec![0.1, -0.2, 0.3, 0.9]).unwrap();
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);

        let dup = Tensor::new(&[2, 4], vec![0.1, -0.2, 0.3, 0.9, 0.1, -0.2, 0.3, 0.9]).unwrap();
        let out = model.logits(&dup).unwrap();
        assert_eq!(&out.values()[..3], &out.values()[3..]);
    }

    #[test]
    fn all_zero_weights_collapse_logits() {
        let spec = ModelSpec::mlp(&[4], &[5], 3, 11);
        let mut model = build_model::<f64>(&spec).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.store_mut().load_flat(&zeros).unwrap();
        let x = Tensor::new(&[2, 4], vec![0.5, -1.0, 2.0, 0.0, -9.0, 3.0, 1.0, 1.0]).unwrap();
        let logits = model.logits(&x).unwrap();
        assert_eq!(&logits.values()[..3], &logits.values()[3..]);
    }

    #[test]
    fn log_likelihood_matches_negative_nll_and_uniform_start() {
        // Wide layers shrink the fan-in init, so an untrained 2-class model
        // predicts near-uniformly: log-likelihood close to -ln 2.
        let spec = ModelSpec::mlp(&[100], &[100], 2, 5);
        let model = build_model::<f64>(&spec).unwrap();
        let x = Tensor::new(&[100], vec![0.01; 100]).unwrap();
        let ll = model.log_likelihood(&x, 0).unwrap();
        assert!(
            (ll + std::f64::consts::LN_2).abs() < 0.2,
            "expected near-uniform log-likelihood, got {ll}"
        );

        let lp = model.log_probs(&x).unwrap();
        assert!((ll - lp.values()[0]).abs() < 1e-15);
    }

    #[test]
    fn flat_index_round_trip() {
        let spec = ModelSpec::mlp(&[3], &[4], 2, 2);
        let mut model = build_model::<f64>(&spec).unwrap();
        let n = model.param_count();
        for i in [0usize, 1, n / 2, n - 1] {
            model.store_mut().set_flat(i, 0.125 + i as f64).unwrap();
            assert_eq!(model.store().get_flat(i).unwrap(), 0.125 + i as f64);
        }
        assert!(model.store().get_flat(n).is_err());
    }

    #[test]
    fn iteration_order_is_weights_before_biases() {
        let model = build_model::<f32>(&mnist_mlp_spec(1)).unwrap();
        let names: Vec<&str> = (0..model.store().param_count())
            .map(|i| model.store().name(i))
            .collect();
        assert_eq!(names, vec!["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]);
    }

    #[test]
    fn apply_mask_zero_touches_exactly_the_masked_indices() {
        let spec = ModelSpec::mlp(&[3], &[4], 2, 9);
        let mut model = build_model::<f64>(&spec).unwrap();
        let n = model.param_count();
        let before = model.store().flat_values();

        // All-false mask: bitwise identity.
        let none = WeightMask::from_bits(vec![false; n], 1.0);
        model.apply_mask_zero(&none).unwrap();
        assert_eq!(model.store().flat_values(), before);

        // Single index.
        let mut bits = vec![false; n];
        bits[5] = true;
        let one = WeightMask::from_bits(bits, 1.0);
        model.apply_mask_zero(&one).unwrap();
        let after = model.store().flat_values();
        for i in 0..n {
            if i == 5 {
                assert_eq!(after[i], 0.0);
            } else {
                assert_eq!(after[i].to_bits(), before[i].to_bits());
            }
        }

        // All-true mask: everything zero.
        let all = WeightMask::from_bits(vec![true; n], 1.0);
        model.apply_mask_zero(&all).unwrap();
        assert!(model.store().flat_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let spec = ModelSpec::mlp(&[3], &[4], 2, 9);
        let mut model = build_model::<f64>(&spec).unwrap();
        let bad = WeightMask::from_bits(vec![false; 3], 1.0);
        assert!(matches!(
            model.apply_mask_zero(&bad),
            Err(Error::Length { .. })
        ));
    }
}
