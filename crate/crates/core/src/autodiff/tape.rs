//! Operation tape and reverse-mode backward pass.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Convolution geometry, resolved at record time.
#[derive(Clone, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    /// C[m,p] = A[m,k] * B[k,p]
    Matmul { a: NodeId, b: NodeId },
    /// Elementwise sum of two same-shape tensors.
    Add { a: NodeId, b: NodeId },
    /// Bias broadcast: (B,F)+(F) or (B,C,H,W)+(C). The only broadcast rule
    /// in the core.
    AddBias { x: NodeId, bias: NodeId },
    Neg { x: NodeId },
    Scale { x: NodeId, factor: S },
    Relu { x: NodeId },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: NodeId,
        /// Flat input index of each window maximum, recorded at forward time.
        argmax: Vec<usize>,
    },
    Reshape { x: NodeId },
    /// Row-wise over the last axis.
    LogSoftmax { x: NodeId },
    /// -log_probs[label] per row; scalar output, optionally batch-mean.
    NllLoss {
        log_probs: NodeId,
        labels: Vec<usize>,
        mean: bool,
    },
    /// Sum of all elements; scalar output.
    Sum { x: NodeId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records primitive operations in topological order. Single-owner; for
/// concurrent gradient work give each worker its own tape over shared
/// read-only parameters.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        debug_assert!(
            value.values().iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register an input tensor. Gradients flow to it iff `requires_grad`
    /// was set on the tensor.
    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul expects [m,k]x[k,p], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * p];
        mm_nn(
            self.value(a).values(),
            self.value(b).values(),
            &mut out,
            m,
            k,
            p,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(vec![m, p], out), Op::Matmul { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add expects equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Add { a, b }, needs))
    }

    /// Add a bias vector over the trailing feature axis of a batch:
    /// `(B,F)+(F)`, or over the channel axis of an image batch:
    /// `(B,C,H,W)+(C)` / `(C,H,W)+(C)`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape();
        if sb.len() != 1 {
            return Err(Error::Dimension(format!(
                "bias must be rank-1, got {sb:?}"
            )));
        }
        let b_len = sb[0];
        let ok = match sx.len() {
            2 => sx[1] == b_len,
            3 => sx[0] == b_len,
            4 => sx[1] == b_len,
            _ => false,
        };
        if !ok {
            return Err(Error::Dimension(format!(
                "cannot broadcast bias {sb:?} over {sx:?}"
            )));
        }
        let xv = self.value(x).values();
        let bv = self.value(bias).values();
        let mut out = Vec::with_capacity(xv.len());
        match sx.len() {
            2 => {
                for row in xv.chunks_exact(b_len) {
                    for (v, b) in row.iter().zip(bv) {
                        out.push(*v + *b);
                    }
                }
            }
            _ => {
                // Channel-major images: contiguous plane per channel.
                let plane: usize = sx[sx.len() - 2] * sx[sx.len() - 1];
                for (i, v) in xv.iter().enumerate() {
                    out.push(*v + bv[(i / plane) % b_len]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::from_raw(sx, out), Op::AddBias { x, bias }, needs))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let out: Vec<S> = self.value(x).values().iter().map(|v| -*v).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_raw(shape, out), Op::Neg { x }, needs)
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let out: Vec<S> = self.value(x).values().iter().map(|v| *v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_raw(shape, out), Op::Scale { x, factor }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<S> = self
            .value(x)
            .values()
            .iter()
            .map(|v| v.maximum(S::ZERO))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_raw(shape, out), Op::Relu { x }, needs)
    }

    /// Cross-correlation of `(B,C_in,H,W)` (or `(C_in,H,W)`) with a kernel
    /// `(C_out,C_in,kh,kw)`. `H' = (H + 2*padding - kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if sk.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be rank-4, got {sk:?}"
            )));
        }
        let (rank3, batch, c_in, h, w) = match si.len() {
            3 => (true, 1, si[0], si[1], si[2]),
            4 => (false, si[0], si[1], si[2], si[3]),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d input must be rank-3 or rank-4, got {si:?}"
                )))
            }
        };
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        };

        let xv = self.value(input).values();
        let kv = self.value(kernel).values();
        let mut out = vec![S::ZERO; batch * c_out * h_out * w_out];
        conv2d_forward(xv, kv, &mut out, &geom);

        let shape = if rank3 {
            vec![c_out, h_out, w_out]
        } else {
            vec![batch, c_out, h_out, w_out]
        };
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            needs,
        ))
    }

    /// Window max over `(B,C,H,W)` or `(C,H,W)`, no padding. Gradients route
    /// to the recorded argmax (first maximum in scan order on ties).
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let (rank3, batch, channels, h, w) = match sx.len() {
            3 => (true, 1, sx[0], sx[1], sx[2]),
            4 => (false, sx[0], sx[1], sx[2], sx[3]),
            _ => {
                return Err(Error::Dimension(format!(
                    "maxpool2d input must be rank-3 or rank-4, got {sx:?}"
                )))
            }
        };
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(Error::Dimension(format!(
                "maxpool2d window {k} stride {stride} invalid for {h}x{w}"
            )));
        }
        let h_out = (h - k) / stride + 1;
        let w_out = (w - k) / stride + 1;

        let xv = self.value(x).values();
        let out_len = batch * channels * h_out * w_out;
        let mut out = vec![S::ZERO; out_len];
        let mut argmax = vec![0usize; out_len];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * h * w;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut best_idx = base + (oy * stride) * w + ox * stride;
                        let mut best = xv[best_idx];
                        for ky in 0..k {
                            for kx in 0..k {
                                let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((b * channels + c) * h_out + oy) * w_out + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let shape = if rank3 {
            vec![channels, h_out, w_out]
        } else {
            vec![batch, channels, h_out, w_out]
        };
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::MaxPool2d { x, argmax },
            needs,
        ))
    }

    /// Reshape without moving data (gradient is a reshape back).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape { x }, needs))
    }

    /// Flatten to `(B, rest)` keeping the leading batch axis, or to a
    /// rank-1 vector when the input is rank-1/3.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        let target = match s.len() {
            0 | 1 => vec![self.value(x).numel()],
            2 => s,
            3 => vec![s.iter().product()],
            _ => vec![s[0], s[1..].iter().product()],
        };
        self.reshape(x, &target)
    }

    /// Numerically stable log-softmax over the last axis. Input rank-1
    /// (one row) or rank-2 (batch of rows); `c >= 2` classes.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        let c = *s.last().ok_or_else(|| {
            Error::Dimension("log_softmax needs at least one axis".into())
        })?;
        if s.len() > 2 {
            return Err(Error::Dimension(format!(
                "log_softmax expects rank-1 or rank-2 input, got {s:?}"
            )));
        }
        if c < 2 {
            return Err(Error::Dimension(format!(
                "log_softmax needs >= 2 classes, got {c}"
            )));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            let m = row.iter().fold(row[0], |acc, v| acc.maximum(*v));
            let mut sum = S::ZERO;
            for v in row {
                sum += (*v - m).exp();
            }
            let log_sum = sum.ln();
            for v in row {
                out.push(*v - m - log_sum);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_raw(s, out), Op::LogSoftmax { x }, needs))
    }

    /// Negative log likelihood of the observed labels. `log_probs` is
    /// rank-1 with one label or rank-2 with one label per row; output is a
    /// scalar (summed, or batch-mean when `mean`).
    pub fn nll_loss(&mut self, log_probs: NodeId, labels: &[usize], mean: bool) -> Result<NodeId> {
        let s = self.value(log_probs).shape().to_vec();
        let (rows, c) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                return Err(Error::Dimension(format!(
                    "nll_loss expects rank-1 or rank-2 log-probs, got {s:?}"
                )))
            }
        };
        if labels.len() != rows {
            return Err(Error::Length {
                expected: rows,
                actual: labels.len(),
                context: "nll_loss labels".into(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lp = self.value(log_probs).values();
        let mut total = S::ZERO;
        for (row, &label) in labels.iter().enumerate() {
            total -= lp[row * c + label];
        }
        if mean {
            total = total / S::from_f64(rows as f64);
        }
        let needs = self.needs(log_probs);
        Ok(self.push(
            Tensor::from_raw(vec![], vec![total]),
            Op::NllLoss {
                log_probs,
                labels: labels.to_vec(),
                mean,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut total = S::ZERO;
        for v in self.value(x).values() {
            total += *v;
        }
        let needs = self.needs(x);
        self.push(Tensor::from_raw(vec![], vec![total]), Op::Sum { x }, needs)
    }

    /// Reverse-mode pass from a scalar root. Returns per-node gradients;
    /// look up leaves of interest with [`Gradients::get`].
    ///
    /// Deterministic: a fixed tape yields bitwise-identical gradients on
    /// every call.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![S::ONE]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let sa = self.value(*a).shape();
                    let (m, k) = (sa[0], sa[1]);
                    let p = self.value(*b).shape()[1];
                    if self.needs(*a) {
                        // dA = dC * B^T
                        let ga = self.grad_buf(&mut grads, *a);
                        mm_nt(&g, self.value(*b).values(), ga, m, k, p);
                    }
                    if self.needs(*b) {
                        // dB = A^T * dC
                        let gb = self.grad_buf(&mut grads, *b);
                        mm_tn(self.value(*a).values(), &g, gb, m, k, p);
                    }
                }
                Op::Add { a, b } => {
                    for &input in &[*a, *b] {
                        if self.needs(input) {
                            let gi = self.grad_buf(&mut grads, input);
                            for (acc, v) in gi.iter_mut().zip(&g) {
                                *acc += *v;
                            }
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.needs(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for (acc, v) in gx.iter_mut().zip(&g) {
                            *acc += *v;
                        }
                    }
                    if self.needs(*bias) {
                        let sx = self.value(*x).shape().to_vec();
                        let b_len = self.value(*bias).numel();
                        let gb = self.grad_buf(&mut grads, *bias);
                        match sx.len() {
                            2 => {
                                for row in g.chunks_exact(b_len) {
                                    for (acc, v) in gb.iter_mut().zip(row) {
                                        *acc += *v;
                                    }
                                }
                            }
                            _ => {
                                let plane: usize = sx[sx.len() - 2] * sx[sx.len() - 1];
                                for (i, v) in g.iter().enumerate() {
                                    gb[(i / plane) % b_len] += *v;
                                }
                            }
                        }
                    }
                }
                Op::Neg { x } => {
                    if self.needs(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for (acc, v) in gx.iter_mut().zip(&g) {
                            *acc -= *v;
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if self.needs(*x) {
                        let f = *factor;
                        let gx = self.grad_buf(&mut grads, *x);
                        for (acc, v) in gx.iter_mut().zip(&g) {
                            *acc += *v * f;
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.needs(*x) {
                        let xv = self.value(*x).values().to_vec();
                        let gx = self.grad_buf(&mut grads, *x);
                        // Subgradient at 0 is 0 by convention.
                        for ((acc, v), xi) in gx.iter_mut().zip(&g).zip(&xv) {
                            if *xi > S::ZERO {
                                *acc += *v;
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                } => {
                    let geom = geom.clone();
                    if self.needs(*input) {
                        let kv = self.value(*kernel).values().to_vec();
                        let gi = self.grad_buf(&mut grads, *input);
                        conv2d_backward_input(&g, &kv, gi, &geom);
                    }
                    if self.needs(*kernel) {
                        let xv = self.value(*input).values().to_vec();
                        let gk = self.grad_buf(&mut grads, *kernel);
                        conv2d_backward_kernel(&g, &xv, gk, &geom);
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    if self.needs(*x) {
                        let argmax = argmax.clone();
                        let gx = self.grad_buf(&mut grads, *x);
                        for (o, v) in g.iter().enumerate() {
                            gx[argmax[o]] += *v;
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.needs(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for (acc, v) in gx.iter_mut().zip(&g) {
                            *acc += *v;
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    if self.needs(*x) {
                        let c = *self.value(*x).shape().last().unwrap();
                        let yv = self.value(NodeId(idx)).values().to_vec();
                        let gx = self.grad_buf(&mut grads, *x);
                        // dx_i = dy_i - softmax_i * sum_j dy_j, per row.
                        for (r, gy_row) in g.chunks_exact(c).enumerate() {
                            let mut gy_sum = S::ZERO;
                            for v in gy_row {
                                gy_sum += *v;
                            }
                            for i in 0..c {
                                let p = yv[r * c + i].exp();
                                gx[r * c + i] += gy_row[i] - p * gy_sum;
                            }
                        }
                    }
                }
                Op::NllLoss {
                    log_probs,
                    labels,
                    mean,
                } => {
                    if self.needs(*log_probs) {
                        let c = *self.value(*log_probs).shape().last().unwrap();
                        let coeff = if *mean {
                            g[0] / S::from_f64(labels.len() as f64)
                        } else {
                            g[0]
                        };
                        let labels = labels.clone();
                        let gl = self.grad_buf(&mut grads, *log_probs);
                        for (row, &label) in labels.iter().enumerate() {
                            gl[row * c + label] -= coeff;
                        }
                    }
                }
                Op::Sum { x } => {
                    if self.needs(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for acc in gx.iter_mut() {
                            *acc += g[0];
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Borrow (allocating if absent) the gradient accumulator of `id`.
    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<S>>], id: NodeId) -> &'g mut Vec<S> {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![S::ZERO; self.nodes[id.0].value.numel()]);
        }
        slot.as_mut().unwrap()
    }
}

/// Gradient of every node touched by a backward pass.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a node, if it participated in the pass.
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────

/// C[m,n] += A[m,k] * B[k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (rows of both operands are contiguous)
fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

fn conv2d_forward<S: Scalar>(x: &[S], k: &[S], out: &mut [S], g: &ConvGeom) {
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = S::ZERO;
                    for ci in 0..g.c_in {
                        let x_base = (b * g.c_in + ci) * g.h * g.w;
                        let k_base = (co * g.c_in + ci) * g.kh * g.kw;
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[x_base + iy as usize * g.w + ix as usize]
                                    * k[k_base + ky * g.kw + kx];
                            }
                        }
                    }
                    out[((b * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
    }
}

fn conv2d_backward_input<S: Scalar>(gout: &[S], k: &[S], gin: &mut [S], g: &ConvGeom) {
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let go = gout[((b * g.c_out + co) * g.h_out + oy) * g.w_out + ox];
                    for ci in 0..g.c_in {
                        let x_base = (b * g.c_in + ci) * g.h * g.w;
                        let k_base = (co * g.c_in + ci) * g.kh * g.kw;
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                gin[x_base + iy as usize * g.w + ix as usize] +=
                                    go * k[k_base + ky * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel<S: Scalar>(gout: &[S], x: &[S], gk: &mut [S], g: &ConvGeom) {
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let go = gout[((b * g.c_out + co) * g.h_out + oy) * g.w_out + ox];
                    for ci in 0..g.c_in {
                        let x_base = (b * g.c_in + ci) * g.h * g.w;
                        let k_base = (co * g.c_in + ci) * g.kh * g.kw;
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                gk[k_base + ky * g.kw + kx] +=
                                    go * x[x_base + iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], values: Vec<f64>, grad: bool) -> NodeId {
        tape.leaf(Tensor::new(shape, values).unwrap().with_requires_grad(grad))
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 2], vec![1.0, 2.0], false);
        let b = leaf(&mut tape, &[2, 1], vec![3.0, 4.0], false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6], false);
        let b = leaf(&mut tape, &[2, 2], vec![0.0; 4], false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_matmul_grad_is_ones_times_b_transposed() {
        // d sum(A*B) / dA = ones(m,p) * B^T, i.e. row sums of B broadcast.
        let mut tape = Tape::new();
        let a = leaf(
            &mut tape,
            &[3, 3],
            vec![0.3, -1.2, 0.7, 0.1, 0.0, 2.0, -0.5, 0.9, 1.1],
            true,
        );
        let bvals = vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0, 0.0, 4.0, 2.0];
        let b = leaf(&mut tape, &[3, 3], bvals.clone(), false);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        for i in 0..3 {
            for kk in 0..3 {
                let row_sum: f64 = (0..3).map(|j| bvals[kk * 3 + j]).sum();
                assert!((ga[i * 3 + kk] - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            &[1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            false,
        );
        let k = leaf(&mut tape, &[1, 1, 1, 1], vec![1.0], false);
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
        assert_eq!(tape.value(y).values(), tape.value(x).values());
    }

    #[test]
    fn conv2d_all_ones_window() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], vec![1.0; 4], false);
        let k = leaf(&mut tape, &[1, 1, 2, 2], vec![1.0; 4], false);
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).values(), &[4.0]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 2, 2], vec![0.0; 4], false);
        let k = leaf(&mut tape, &[1, 1, 3, 3], vec![0.0; 9], false);
        assert!(tape.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn relu_and_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![-1.0, 0.0, 2.0], true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        // Exactly zero input gets zero gradient.
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_hand_case() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).values(), &[4.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![0.0, 0.0], false);
        let y = tape.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for v in tape.value(y).values() {
            assert!((v + ln2).abs() < 1e-15);
        }

        let big = leaf(&mut tape, &[2], vec![1000.0, 0.0], false);
        let yb = tape.log_softmax(big).unwrap();
        let vals = tape.value(yb).values();
        assert!(vals[0].abs() < 1e-12);
        assert!((vals[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut tape = Tape::new();
        let logits: Vec<f64> = (0..10).map(|i| (i as f64 * 37.0).sin() * 3.0).collect();
        let x = leaf(&mut tape, &[10], logits, false);
        let y = tape.log_softmax(x).unwrap();
        let total: f64 = tape.value(y).values().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_loss_hand_cases() {
        let ln2 = std::f64::consts::LN_2;
        let mut tape = Tape::new();
        let lp = leaf(&mut tape, &[2], vec![-ln2, -ln2], false);
        let loss = tape.nll_loss(lp, &[0], true).unwrap();
        assert!((tape.value(loss).item().unwrap() - ln2).abs() < 1e-15);

        // Confident correct prediction: loss near zero.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![30.0, -30.0], false);
        let lp = tape.log_softmax(x).unwrap();
        let loss = tape.nll_loss(lp, &[0], true).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-12);
    }

    #[test]
    fn nll_loss_label_out_of_range() {
        let mut tape = Tape::new();
        let lp = leaf(&mut tape, &[3], vec![-1.0, -1.0, -1.0], false);
        assert!(matches!(
            tape.nll_loss(lp, &[3], true),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let logits = vec![0.4, -1.3, 2.2, 0.0];
        let label = 2usize;
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], logits.clone(), true);
        let lp = tape.log_softmax(x).unwrap();
        let loss = tape.nll_loss(lp, &[label], true).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();

        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        for i in 0..4 {
            let p = (logits[i] - m).exp() / z;
            let expected = p - if i == label { 1.0 } else { 0.0 };
            assert!((gx[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_square_function() {
        // f(w) = w*w at w=3 -> df/dw = 6, via matmul of 1x1 tensors.
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[1, 1], vec![3.0], true);
        let y = tape.matmul(w, w).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0], true);
        let c = leaf(&mut tape, &[3], vec![5.0, 5.0, 5.0], false);
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        // w never feeds the root; no gradient recorded for it.
        assert!(grads.get(w).is_none());
        assert_eq!(tape.value(s).item().unwrap(), 15.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0], true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..12).map(|i| ((i * 31) as f64).sin()).collect();
        let a = leaf(&mut tape, &[3, 4], vals, true);
        let b = leaf(
            &mut tape,
            &[4, 2],
            (0..8).map(|i| ((i * 17) as f64).cos()).collect(),
            true,
        );
        let c = tape.matmul(a, b).unwrap();
        let r = tape.relu(c);
        let s = tape.sum(r);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(a).unwrap(), g2.get(a).unwrap());
        assert_eq!(g1.get(b).unwrap(), g2.get(b).unwrap());
    }

    #[test]
    fn add_bias_broadcasts_over_batch_and_channels() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![0.0; 6], false);
        let b = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0], true);
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0, 2.0]);

        let mut tape = Tape::new();
        let img = leaf(&mut tape, &[2, 2, 1, 2], vec![0.0; 8], false);
        let cb = leaf(&mut tape, &[2], vec![10.0, 20.0], false);
        let y = tape.add_bias(img, cb).unwrap();
        assert_eq!(
            tape.value(y).values(),
            &[10.0, 10.0, 20.0, 20.0, 10.0, 10.0, 20.0, 20.0]
        );
    }
}
