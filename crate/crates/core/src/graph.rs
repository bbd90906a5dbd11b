//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] records every forward operation as a node holding its inputs,
//! its computed value, and whatever the backward pass will need (im2col
//! patches, max-pool argmax indices, batch-norm statistics, softmax
//! probabilities). [`Graph::backward`] then sweeps the tape in reverse index
//! order, accumulating gradients with `+=` into per-node buffers; gradients
//! propagate only into nodes that (transitively) require them.
//!
//! Values are computed eagerly at construction time, so loss terms can be
//! read out immediately after being built — the training loop logs a
//! breakdown of the very graph it is about to differentiate.
//!
//! In debug builds every node's output is scanned for NaN/Inf right after it
//! is computed; non-finite propagation is a bug, never silent.
//!
//! Design notes recorded from the architecture tables:
//! * Convolution is *valid* (no padding). The tables' fan-in arithmetic
//!   demands it: 36 →(3×3)→ 34 →(pool)→ 17 →(3×3)→ 15 →(pool)→ 7, giving the
//!   flatten size 64·7·7 = 3136 of the "FC 3136 × …" rows.
//! * Max-pool is 2×2 with floor semantics (15 → 7), and ties route the
//!   gradient to the first maximal element in row-major window order.
//! * Batch norm uses biased batch variance for normalization, momentum-0.1
//!   exponential running stats (unbiased variance), and ε = 1e-5.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Element, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-norm running statistics, owned by the model (one per BN layer) and
/// updated only by training-mode forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<E: Element> {
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    /// EMA momentum for the running stats.
    pub momentum: E,
    /// Variance floor inside the square root.
    pub eps: E,
}

impl<E: Element> BnStats<E> {
    /// Fresh stats: mean 0, variance 1 — the documented pre-training
    /// eval-mode behavior.
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: vec![E::ZERO; channels],
            running_var: vec![E::ONE; channels],
            momentum: E::from_f64(0.1),
            eps: E::from_f64(1e-5),
        }
    }
}

/// Saved context for a batch-norm node (either mode).
#[derive(Debug)]
struct BnCache<E: Element> {
    /// Normalized activations x̂.
    xhat: Vec<E>,
    /// Per-channel 1/√(var + ε) actually used in the forward pass.
    invstd: Vec<E>,
    channels: usize,
    spatial: usize,
    train: bool,
}

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, E),
    Exp(usize),
    Relu(usize),
    /// Full reduction to a scalar.
    Sum(usize),
    /// One element of a vector, as a scalar.
    Select(usize, usize),
    /// Same buffer, different extents (e.g. flatten before an FC layer).
    Reshape(usize),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        /// Cached im2col patch rows of `x`, reused for dW and dx.
        cols: Vec<E>,
    },
    MaxPool {
        x: usize,
        /// Per output element: linear index of the chosen input element.
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: BnCache<E>,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        /// Cached softmax probabilities [N, I].
        probs: Vec<E>,
    },
}

#[derive(Debug)]
struct Node<E: Element> {
    op: Op<E>,
    shape: Vec<usize>,
    data: Vec<E>,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every tape node that needed them.
pub struct Gradients<E: Element> {
    per_node: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient buffer for `v`, if `v` participated in the loss and required
    /// gradients.
    pub fn wrt(&self, v: Var) -> Option<&[E]> {
        self.per_node.get(v.0).and_then(|g| g.as_deref())
    }
}

/// The eager autodiff tape.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value buffer of a node.
    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> E {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    // Non-finite values are allowed to propagate IEEE-style through the
    // tape; the guard that matters operationally sits where a training loop
    // inspects its loss, so a divergence is reported with the offending
    // loss term rather than a mid-graph abort.
    fn push(&mut self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor as a tape input; gradients flow into it iff the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Record a raw buffer as a tape input.
    pub fn leaf_data(&mut self, shape: &[usize], data: Vec<E>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape.to_vec(), data, needs_grad)
    }

    /// A constant scalar node.
    pub fn constant_scalar(&mut self, v: E) -> Var {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    fn binary_shapes_match(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{what}: operand shapes {:?} vs {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes_match(a, b, "add")?;
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x + y).collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Add(a.0, b.0), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes_match(a, b, "sub")?;
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x - y).collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Sub(a.0, b.0), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes_match(a, b, "mul")?;
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x * y).collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Mul(a.0, b.0), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Neg(a.0), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::AddScalar(a.0), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::MulScalar(a.0, c), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Exp(a.0), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(E::ZERO)).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Relu(a.0), self.nodes[a.0].shape.clone(), data, needs)
    }

    /// Full reduction to a scalar (fixed summation order: buffer order).
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in &self.nodes[a.0].data {
            acc += v;
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(Op::Sum(a.0), vec![1], vec![acc], needs)
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.sum(a);
        self.mul_scalar(s, E::ONE / E::from_f64(n as f64))
    }

    /// Reinterpret `a` with new extents of identical product.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].data.len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} ({} elements) cannot become {:?} ({} elements)",
                self.nodes[a.0].shape,
                self.nodes[a.0].data.len(),
                shape,
                n
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::Reshape(a.0), shape.to_vec(), data, needs))
    }

    /// Element `idx` of a vector node, as a scalar.
    pub fn select(&mut self, a: Var, idx: usize) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        if idx >= n {
            return Err(Error::Index(format!("select: index {idx} out of range for length {n}")));
        }
        let v = self.nodes[a.0].data[idx];
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::Select(a.0, idx), vec![1], vec![v], needs))
    }

    /// Affine map `x·w + b` for `x[N,Din]`, `w[Din,Dout]`, `b[Dout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) =
            (&self.nodes[x.0].shape, &self.nodes[w.0].shape, &self.nodes[b.0].shape);
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Dimension(format!(
                "dense: input {:?} × weight {:?} + bias {:?} — need [N,Din]×[Din,Dout]+[Dout]",
                xs, ws, bs
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut data =
            linalg::matmul(&self.nodes[x.0].data, n, din, &self.nodes[w.0].data, dout);
        linalg::add_bias_rows(&mut data, &self.nodes[b.0].data, n, dout);
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(Op::Dense { x: x.0, w: w.0, b: b.0 }, vec![n, dout], data, needs))
    }

    /// Valid (unpadded) convolution of `x[N,C,H,W]` with `w[F,C,kh,kw]` and
    /// `b[F]`, lowered onto matrix multiplication via im2col.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) =
            (&self.nodes[x.0].shape, &self.nodes[w.0].shape, &self.nodes[b.0].shape);
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?} — need [N,C,H,W], [F,C,kh,kw], [F]",
                xs, ws, bs
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input channels {} vs kernel channels {}",
                xs[1], ws[1]
            )));
        }
        if ws[0] != bs[0] {
            return Err(Error::Dimension(format!(
                "conv2d: filters {} vs bias length {}",
                ws[0], bs[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be ≥ 1".into()));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        if h < kh || wd < kw {
            return Err(Error::Dimension(format!(
                "conv2d: spatial input {h}×{wd} smaller than kernel {kh}×{kw}"
            )));
        }
        let ho = linalg::conv_out_extent(h, kh, stride);
        let wo = linalg::conv_out_extent(wd, kw, stride);
        let patch = c * kh * kw;
        let rows = n * ho * wo;

        let cols = linalg::im2col(&self.nodes[x.0].data, n, c, h, wd, kh, kw, stride);
        let w_t = linalg::transpose(&self.nodes[w.0].data, f, patch);
        let mut out_rows = linalg::matmul(&cols, rows, patch, &w_t, f);
        linalg::add_bias_rows(&mut out_rows, &self.nodes[b.0].data, rows, f);
        let data = linalg::rows_to_nchw(&out_rows, n, f, ho * wo);

        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, cols },
            vec![n, f, ho, wo],
            data,
            needs,
        ))
    }

    /// 2×2 max pooling with stride 2 and floor semantics; gradient routes to
    /// the first maximal element of each window in row-major order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].shape;
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("maxpool2x2: input {:?} — need [N,C,H,W]", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "maxpool2x2: spatial extents {h}×{w} below the 2×2 window"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = &self.nodes[x.0].data;
        let mut data = vec![E::ZERO; n * c * ho * wo];
        let mut argmax = vec![0u32; n * c * ho * wo];
        let mut o = 0;
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for y in 0..ho {
                    for xg in 0..wo {
                        let i00 = base + (2 * y) * w + 2 * xg;
                        // row-major window order: (0,0), (0,1), (1,0), (1,1);
                        // strict > keeps the first maximal element on ties.
                        let mut best_i = i00;
                        let mut best_v = src[i00];
                        for &cand in &[i00 + 1, i00 + w, i00 + w + 1] {
                            if src[cand] > best_v {
                                best_v = src[cand];
                                best_i = cand;
                            }
                        }
                        data[o] = best_v;
                        argmax[o] = best_i as u32;
                        o += 1;
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::MaxPool { x: x.0, argmax }, vec![n, c, ho, wo], data, needs))
    }

    /// Batch normalization. `train: true` normalizes with batch statistics
    /// (biased variance) and updates `stats` by EMA; `train: false` uses the
    /// running statistics as constants. Channels are axis 1 for rank-4 input
    /// and the feature axis for rank-2 input.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<E>,
        train: bool,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let (channels, spatial) = match xs.len() {
            2 => (xs[1], 1),
            4 => (xs[1], xs[2] * xs[3]),
            _ => {
                return Err(Error::Dimension(format!(
                    "batchnorm: input {:?} — need [N,D] or [N,C,H,W]",
                    xs
                )))
            }
        };
        let n = xs[0];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape != [channels] {
                return Err(Error::Dimension(format!(
                    "batchnorm: {name} shape {:?} vs {} channels",
                    self.nodes[v.0].shape, channels
                )));
            }
        }
        if stats.running_mean.len() != channels {
            return Err(Error::Dimension(format!(
                "batchnorm: running stats track {} channels, input has {}",
                stats.running_mean.len(),
                channels
            )));
        }

        let count = n * spatial;
        let src = &self.nodes[x.0].data;
        let (mean, var): (Vec<E>, Vec<E>) = if train {
            let inv_count = E::ONE / E::from_f64(count as f64);
            let mut mean = vec![E::ZERO; channels];
            let mut var = vec![E::ZERO; channels];
            for img in 0..n {
                for ch in 0..channels {
                    let slice = &src[((img * channels + ch) * spatial)..][..spatial];
                    let mut acc = E::ZERO;
                    for &v in slice {
                        acc += v;
                    }
                    mean[ch] += acc;
                }
            }
            for m in mean.iter_mut() {
                *m = *m * inv_count;
            }
            for img in 0..n {
                for ch in 0..channels {
                    let slice = &src[((img * channels + ch) * spatial)..][..spatial];
                    let m = mean[ch];
                    let mut acc = E::ZERO;
                    for &v in slice {
                        acc += (v - m) * (v - m);
                    }
                    var[ch] += acc;
                }
            }
            for v in var.iter_mut() {
                *v = *v * inv_count; // biased variance for normalization
            }
            // Running stats: EMA with unbiased variance (falls back to the
            // biased value for a single-element batch).
            let unbias = if count > 1 {
                E::from_f64(count as f64 / (count as f64 - 1.0))
            } else {
                E::ONE
            };
            let m1 = E::ONE - stats.momentum;
            for ch in 0..channels {
                stats.running_mean[ch] = m1 * stats.running_mean[ch] + stats.momentum * mean[ch];
                stats.running_var[ch] =
                    m1 * stats.running_var[ch] + stats.momentum * (var[ch] * unbias);
            }
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };

        let invstd: Vec<E> = var.iter().map(|&v| E::ONE / (v + stats.eps).sqrt()).collect();
        let g = &self.nodes[gamma.0].data;
        let bt = &self.nodes[beta.0].data;
        let mut xhat = vec![E::ZERO; src.len()];
        let mut data = vec![E::ZERO; src.len()];
        for img in 0..n {
            for ch in 0..channels {
                let base = (img * channels + ch) * spatial;
                let (m, is, gc, bc) = (mean[ch], invstd[ch], g[ch], bt[ch]);
                let src_s = &src[base..base + spatial];
                let xh = &mut xhat[base..base + spatial];
                let out = &mut data[base..base + spatial];
                for i in 0..spatial {
                    let h = (src_s[i] - m) * is;
                    xh[i] = h;
                    out[i] = gc * h + bc;
                }
            }
        }

        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                cache: BnCache { xhat, invstd, channels, spatial, train },
            },
            xs,
            data,
            needs,
        ))
    }

    /// Mean cross-entropy of `logits[N,I]` against integer labels, computed
    /// in the log-sum-exp stabilized form (row max subtracted).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = &self.nodes[logits.0].shape;
        if ls.len() != 2 {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: logits {:?} — need [N,I]",
                ls
            )));
        }
        let (n, classes) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: {n} logit rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!(
                "softmax_cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![E::ZERO; n * classes];
        let mut loss = E::ZERO;
        for (row, &label) in labels.iter().enumerate() {
            let r = &src[row * classes..(row + 1) * classes];
            let mut mx = r[0];
            for &v in r {
                mx = mx.max(v);
            }
            let mut denom = E::ZERO;
            let p = &mut probs[row * classes..(row + 1) * classes];
            for (pi, &v) in p.iter_mut().zip(r) {
                let e = (v - mx).exp();
                *pi = e;
                denom += e;
            }
            let inv = E::ONE / denom;
            for pi in p.iter_mut() {
                *pi = *pi * inv;
            }
            // −log p[label] in stabilized form: log(denom) − (logit − max).
            loss += denom.ln() - (r[label] - mx);
        }
        loss = loss / E::from_f64(n as f64);
        let needs = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            Op::SoftmaxCe { logits: logits.0, labels: labels.to_vec(), probs },
            vec![1],
            vec![loss],
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`, producing per-node gradient
    /// buffers. Repeated calls are independent; callers accumulate into
    /// parameter grad slots themselves.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { per_node: grads });
        }
        grads[loss.0] = Some(vec![E::ONE]);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { per_node: grads })
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn acc_into(grads: &mut [Option<Vec<E>>], idx: usize, len: usize, f: impl FnOnce(&mut [E])) {
        let buf = grads[idx].get_or_insert_with(|| vec![E::ZERO; len]);
        f(buf);
    }

    /// Deposit an owned, fully-computed gradient: moved in when the slot is
    /// empty (skipping a zero-fill and an extra pass), accumulated otherwise.
    fn move_or_acc(grads: &mut [Option<Vec<E>>], idx: usize, v: Vec<E>) {
        match &mut grads[idx] {
            slot @ None => *slot = Some(v),
            Some(g) => {
                for (gi, d) in g.iter_mut().zip(v) {
                    *gi += d;
                }
            }
        }
    }

    /// Deposit an elementwise gradient `f(i)` over `0..len`: built in a single
    /// pass when the slot is empty, accumulated otherwise.
    fn fill_or_acc(grads: &mut [Option<Vec<E>>], idx: usize, len: usize, f: impl Fn(usize) -> E) {
        match &mut grads[idx] {
            slot @ None => *slot = Some((0..len).map(f).collect()),
            Some(g) => {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += f(i);
                }
            }
        }
    }

    fn propagate(&self, id: usize, gy: &[E], grads: &mut [Option<Vec<E>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    if self.wants(t) {
                        Self::fill_or_acc(grads, t, gy.len(), |i| gy[i]);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::fill_or_acc(grads, *a, gy.len(), |i| gy[i]);
                }
                if self.wants(*b) {
                    Self::fill_or_acc(grads, *b, gy.len(), |i| -gy[i]);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = &self.nodes[*b].data;
                    Self::fill_or_acc(grads, *a, gy.len(), |i| gy[i] * bd[i]);
                }
                if self.wants(*b) {
                    let ad = &self.nodes[*a].data;
                    Self::fill_or_acc(grads, *b, gy.len(), |i| gy[i] * ad[i]);
                }
            }
            Op::Neg(a) => {
                if self.wants(*a) {
                    Self::fill_or_acc(grads, *a, gy.len(), |i| -gy[i]);
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    Self::fill_or_acc(grads, *a, gy.len(), |i| gy[i]);
                }
            }
            Op::MulScalar(a, c) => {
                if self.wants(*a) {
                    let c = *c;
                    Self::fill_or_acc(grads, *a, gy.len(), |i| gy[i] * c);
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let out = &self.nodes[id].data;
                    Self::fill_or_acc(grads, *a, gy.len(), |i| gy[i] * out[i]);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = &self.nodes[*a].data;
                    // Branch-free select so the loop vectorizes.
                    Self::fill_or_acc(grads, *a, gy.len(), |i| {
                        if x[i] > E::ZERO {
                            gy[i]
                        } else {
                            E::ZERO
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let d = gy[0];
                    let n = self.nodes[*a].data.len();
                    Self::fill_or_acc(grads, *a, n, |_| d);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    Self::fill_or_acc(grads, *a, gy.len(), |i| gy[i]);
                }
            }
            Op::Select(a, idx) => {
                if self.wants(*a) {
                    let d = gy[0];
                    let n = self.nodes[*a].data.len();
                    let idx = *idx;
                    Self::acc_into(grads, *a, n, |g| {
                        g[idx] += d;
                    });
                }
            }
            Op::Dense { x, w, b } => {
                let (n, din) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let dout = self.nodes[*w].shape[1];
                if self.wants(*b) {
                    Self::move_or_acc(grads, *b, linalg::sum_rows(gy, n, dout));
                }
                if self.wants(*w) {
                    let dw = linalg::matmul_tn(&self.nodes[*x].data, n, din, gy, dout);
                    Self::move_or_acc(grads, *w, dw);
                }
                if self.wants(*x) {
                    let wt = linalg::transpose(&self.nodes[*w].data, din, dout);
                    Self::move_or_acc(grads, *x, linalg::matmul(gy, n, dout, &wt, din));
                }
            }
            Op::Conv2d { x, w, b, stride, cols } => {
                let xs = &self.nodes[*x].shape;
                let ws = &self.nodes[*w].shape;
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = linalg::conv_out_extent(h, kh, *stride);
                let wo = linalg::conv_out_extent(wd, kw, *stride);
                let rows = n * ho * wo;
                let patch = c * kh * kw;
                let gy_rows = linalg::nchw_to_rows(gy, n, f, ho * wo);
                if self.wants(*b) {
                    Self::move_or_acc(grads, *b, linalg::sum_rows(&gy_rows, rows, f));
                }
                if self.wants(*w) {
                    let dw = linalg::matmul_tn(&gy_rows, rows, f, cols, patch);
                    Self::move_or_acc(grads, *w, dw);
                }
                if self.wants(*x) {
                    let dcols = linalg::matmul(&gy_rows, rows, f, &self.nodes[*w].data, patch);
                    let dx = linalg::col2im_acc(&dcols, n, c, h, wd, kh, kw, *stride);
                    Self::move_or_acc(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let n = self.nodes[*x].data.len();
                    Self::acc_into(grads, *x, n, |g| {
                        for (o, &src_idx) in argmax.iter().enumerate() {
                            g[src_idx as usize] += gy[o];
                        }
                    });
                }
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let (channels, spatial) = (cache.channels, cache.spatial);
                let n = self.nodes[*x].shape[0];
                let count = n * spatial;
                let g_data = &self.nodes[*gamma].data;

                // Per-channel reductions Σdy and Σdy·x̂ (used by all inputs).
                let mut sum_dy = vec![E::ZERO; channels];
                let mut sum_dy_xhat = vec![E::ZERO; channels];
                for img in 0..n {
                    for ch in 0..channels {
                        let base = (img * channels + ch) * spatial;
                        let dys = &gy[base..base + spatial];
                        let xhs = &cache.xhat[base..base + spatial];
                        let mut a = E::ZERO;
                        let mut b2 = E::ZERO;
                        for i in 0..spatial {
                            a += dys[i];
                            b2 += dys[i] * xhs[i];
                        }
                        sum_dy[ch] += a;
                        sum_dy_xhat[ch] += b2;
                    }
                }
                if self.wants(*beta) {
                    Self::move_or_acc(grads, *beta, sum_dy.clone());
                }
                if self.wants(*gamma) {
                    Self::move_or_acc(grads, *gamma, sum_dy_xhat.clone());
                }
                if self.wants(*x) {
                    let inv_count = E::ONE / E::from_f64(count as f64);
                    let len = self.nodes[*x].data.len();
                    let train = cache.train;
                    let mut dx = vec![E::ZERO; len];
                    for img in 0..n {
                        for ch in 0..channels {
                            let base = (img * channels + ch) * spatial;
                            let gc = g_data[ch] * cache.invstd[ch];
                            let out = &mut dx[base..base + spatial];
                            let dys = &gy[base..base + spatial];
                            if train {
                                // dx = γ·invstd·(dy − mean(dy) − x̂·mean(dy·x̂))
                                let mdy = sum_dy[ch] * inv_count;
                                let mdyx = sum_dy_xhat[ch] * inv_count;
                                let xhs = &cache.xhat[base..base + spatial];
                                for ((o, &dy), &xh) in out.iter_mut().zip(dys).zip(xhs) {
                                    *o = gc * (dy - mdy - xh * mdyx);
                                }
                            } else {
                                // Running stats are constants in eval mode.
                                for (o, &dy) in out.iter_mut().zip(dys) {
                                    *o = gc * dy;
                                }
                            }
                        }
                    }
                    Self::move_or_acc(grads, *x, dx);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if self.wants(*logits) {
                    let classes = self.nodes[*logits].shape[1];
                    let n = labels.len();
                    let scale = gy[0] / E::from_f64(n as f64);
                    Self::acc_into(grads, *logits, n * classes, |g| {
                        for (row, &label) in labels.iter().enumerate() {
                            let p = &probs[row * classes..(row + 1) * classes];
                            let gr = &mut g[row * classes..(row + 1) * classes];
                            for (gi, &pi) in gr.iter_mut().zip(p) {
                                *gi += scale * pi;
                            }
                            gr[label] += -scale;
                        }
                    });
                }
            }
        }
    }
}
