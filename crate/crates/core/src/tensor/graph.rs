use rand::Rng;

use super::alloc::SimilarityBuffer;
use super::kernels::{self, canonical_sum, conv_out, gemm};
use super::{Mode, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Configuration of the fused multi-head attention op.
#[derive(Debug, Clone, Default)]
pub struct AttentionOpts {
    pub heads: usize,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// Per-sequence count of valid keys; keys at or beyond it are masked.
    pub key_lengths: Option<Vec<usize>>,
    /// Reduce over keys with an order-independent sum so that permuting the
    /// sequence permutes the output bit for bit.
    pub order_invariant: bool,
}

/// Result of batch normalization with batch statistics.
pub struct BatchNormOutput<T> {
    pub out: Var,
    /// Per-channel batch mean.
    pub mean: Vec<T>,
    /// Per-channel biased batch variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Identity(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Gelu {
        x: usize,
        slope: Vec<T>,
    },
    Sigmoid(usize),
    LogSigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNormApply {
        x: usize,
        mean: usize,
        var: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        cols: Vec<T>,
    },
    GlobalAvgPool(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    MeanRows(usize),
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    Slice {
        x: usize,
        offset: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    PairwiseSign(usize),
    SiglipChunked {
        x: usize,
        y: usize,
        eta: usize,
        zeta: usize,
        chunk: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers and `backward` is a single reverse sweep.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        self.backward_done = false;
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros when the node was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn check_inputs(&self, op: &'static str, inputs: &[Var]) -> Result<(), TensorError> {
        for &v in inputs {
            let node = &self.nodes[v.0];
            if matches!(node.op, Op::Leaf) {
                if let Some(index) = node.value.first_non_finite() {
                    return Err(TensorError::NonFinite {
                        op,
                        index,
                        shape: node.value.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite {
                op: name,
                index,
                shape: value.shape().to_vec(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        self.backward_done = false;
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.check_inputs(name, &[a])?;
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    pub fn identity(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("identity", a, |x| x, Op::Identity(a.0))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_inputs("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("transpose", &[a])?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::invalid("transpose", format!("expected 2-d, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(a.0), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check_inputs("reshape", &[a])?;
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a.0), &[a])
    }

    /// Period with which `b` repeats over `a`, or an error when `b`'s shape is
    /// neither `[1]` nor a suffix of `a`'s.
    fn broadcast_period(&self, op: &'static str, a: Var, b: Var) -> Result<usize, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb: usize = sb.iter().product();
        if nb == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb) {
            Ok(nb)
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.check_inputs(name, &[a, b])?;
        let period = self.broadcast_period(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % period]))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    /// Elementwise `a + b`; `b` may broadcast as a scalar or trailing suffix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::of(c);
        self.unary("scale", a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::of(c);
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, |x| x.ln(), Op::Log(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("neg", a, |x| -x, Op::Neg(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("gelu", &[a])?;
        let src = self.value(a);
        let (data, slope): (Vec<T>, Vec<T>) = src.data().iter().map(|&x| kernels::gelu_with_grad(x)).unzip();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu { x: a.0, slope }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a.0))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log_sigmoid", a, kernels::log_sigmoid, Op::LogSigmoid(a.0))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("softmax", &[a])?;
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax(a.0), &[a])
    }

    /// Per-row normalization over the last axis with learnable scale/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        self.check_inputs("layer_norm", &[x, gamma, beta])?;
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(shape_err("layer_norm", &shape, self.shape(p)));
            }
        }
        let eps = T::of(super::NORM_EPS);
        let nt = T::of(n as f64);
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / n;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    fn channel_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize), TensorError> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TensorError::invalid(op, format!("expected [N, C, H, W], got {s:?}")));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// `(x - mean) / sqrt(var + eps) * gamma + beta` with supplied per-channel
    /// statistics, for `x` of shape `[N, C, H, W]`.
    pub fn batch_norm_apply(
        &mut self,
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        self.check_inputs("batch_norm_apply", &[x, mean, var, gamma, beta])?;
        let (n, c, hw) = self.channel_dims("batch_norm_apply", x)?;
        for p in [mean, var, gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err("batch_norm_apply", self.shape(x), self.shape(p)));
            }
        }
        if self.data(var).iter().any(|&v| v < T::zero()) {
            return Err(TensorError::invalid("batch_norm_apply", "negative variance"));
        }
        let eps = T::of(eps);
        let src = self.data(x);
        let (mu, va, g, b) = (self.data(mean), self.data(var), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                let inv = T::one() / (va[ch] + eps).sqrt();
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = (src[base + p] - mu[ch]) * inv * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "batch_norm_apply",
            value,
            Op::BatchNormApply {
                x: x.0,
                mean: mean.0,
                var: var.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            &[x, mean, var, gamma, beta],
        )
    }

    /// Batch normalization using the statistics of `x` itself; gradients flow
    /// through the statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<BatchNormOutput<T>, TensorError> {
        self.check_inputs("batch_norm_train", &[x, gamma, beta])?;
        let (n, c, hw) = self.channel_dims("batch_norm_train", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err("batch_norm_train", self.shape(x), self.shape(p)));
            }
        }
        let (mean, var) = channel_stats(self.data(x), n, c, hw);
        let eps = T::of(eps);
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    let h = (src[base + p] - mean[ch]) * rstd[ch];
                    xhat[base + p] = h;
                    out[base + p] = h * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let out = self.push(
            "batch_norm_train",
            value,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )?;
        Ok(BatchNormOutput { out, mean, var })
    }

    /// 3×3 convolution, zero padding 1, stride 1 or 2, no bias.
    /// `x: [N, C, H, W]`, `w: [O, C, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        self.check_inputs("conv2d", &[x, w])?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(shape_err("conv2d", sx, sw));
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::invalid("conv2d", format!("unsupported stride {stride}")));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        if h == 0 || wd == 0 {
            return Err(TensorError::invalid("conv2d", "empty spatial extent"));
        }
        let o = sw[0];
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let (kdim, plane) = (c * 9, ho * wo);
        let src = self.data(x);
        let weights = self.data(w);
        let mut cols = vec![T::zero(); n * kdim * plane];
        let mut out = vec![T::zero(); n * o * plane];
        for i in 0..n {
            let col = &mut cols[i * kdim * plane..(i + 1) * kdim * plane];
            kernels::im2col(&src[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, stride, col);
            gemm(o, kdim, plane, weights, false, col, false, &mut out[i * o * plane..], false);
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                cols,
            },
            &[x, w],
        )
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_inputs("global_avg_pool", &[x])?;
        let (n, c, hw) = self.channel_dims("global_avg_pool", x)?;
        let src = self.data(x);
        let denom = T::of(hw as f64);
        let out = (0..n * c)
            .map(|r| src[r * hw..(r + 1) * hw].iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x.0), &[x])
    }

    /// Gathers rows of `table: [V, W]` into `[ids.len(), W]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.check_inputs("embedding", &[table])?;
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::invalid("embedding", format!("table must be 2-d, got {s:?}")));
        }
        let (v, w) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::invalid("embedding", format!("id {bad} out of range {v}")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let value = Tensor::new(vec![ids.len(), w], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Scaled dot-product multi-head attention over `[B, T, E]` inputs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        opts: &AttentionOpts,
    ) -> Result<Var, TensorError> {
        self.check_inputs("attention", &[q, k, v])?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 {
            return Err(TensorError::invalid("attention", format!("expected [B, T, E], got {s:?}")));
        }
        for other in [k, v] {
            if self.shape(other) != s.as_slice() {
                return Err(shape_err("attention", &s, self.shape(other)));
            }
        }
        let (bsz, t, e) = (s[0], s[1], s[2]);
        let heads = opts.heads;
        if heads == 0 || e % heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                format!("width {e} not divisible into {heads} heads"),
            ));
        }
        let lengths = match &opts.key_lengths {
            Some(l) => {
                if l.len() != bsz || l.iter().any(|&n| n == 0 || n > t) {
                    return Err(TensorError::invalid("attention", format!("bad key lengths {l:?}")));
                }
                l.clone()
            }
            None => vec![t; bsz],
        };
        let dh = e / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); bsz * heads * t * t];
        let mut out = vec![T::zero(); bsz * t * e];
        let mut terms = vec![T::zero(); t];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..t {
                    let limit = if opts.causal { (i + 1).min(lengths[b]) } else { lengths[b] };
                    let qrow = &qd[(b * t + i) * e + h * dh..][..dh];
                    let prow = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    let mut max = T::neg_infinity();
                    for j in 0..limit {
                        let krow = &kd[(b * t + j) * e + h * dh..][..dh];
                        let mut dot = T::zero();
                        for d in 0..dh {
                            dot += qrow[d] * krow[d];
                        }
                        let sc = dot * scale;
                        prow[j] = sc;
                        max = max.max(sc);
                    }
                    for p in prow[..limit].iter_mut() {
                        *p = (*p - max).exp();
                    }
                    let denom = if opts.order_invariant {
                        terms[..limit].copy_from_slice(&prow[..limit]);
                        canonical_sum(&mut terms[..limit])
                    } else {
                        prow[..limit].iter().copied().sum::<T>()
                    };
                    for p in prow[..limit].iter_mut() {
                        *p = *p / denom;
                    }
                    let orow = &mut out[(b * t + i) * e + h * dh..][..dh];
                    for (d, o) in orow.iter_mut().enumerate() {
                        if opts.order_invariant {
                            for j in 0..limit {
                                terms[j] = prow[j] * vd[(b * t + j) * e + h * dh + d];
                            }
                            *o = canonical_sum(&mut terms[..limit]);
                        } else {
                            let mut acc = T::zero();
                            for j in 0..limit {
                                acc += prow[j] * vd[(b * t + j) * e + h * dh + d];
                            }
                            *o = acc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean over the rows of a 2-d tensor: `[R, n] -> [1, n]`.
    ///
    /// The reduction is order independent, so permuting rows leaves the
    /// result bitwise unchanged.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("mean_rows", &[a])?;
        let s = self.shape(a);
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::invalid("mean_rows", format!("expected [R>0, n], got {s:?}")));
        }
        let (r, n) = (s[0], s[1]);
        let src = self.data(a);
        let denom = T::of(r as f64);
        let mut col = vec![T::zero(); r];
        let out = (0..n)
            .map(|j| {
                for i in 0..r {
                    col[i] = src[i * n + j];
                }
                canonical_sum(&mut col) / denom
            })
            .collect();
        let value = Tensor::new(vec![1, n], out)?;
        self.push("mean_rows", value, Op::MeanRows(a.0), &[a])
    }

    /// Picks rows of a 2-d tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        self.check_inputs("select_rows", &[a])?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::invalid("select_rows", format!("expected 2-d, got {s:?}")));
        }
        let (r, n) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::invalid("select_rows", format!("row {bad} out of range {r}")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &i in rows {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        self.push(
            "select_rows",
            value,
            Op::SelectRows {
                x: a.0,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    /// Scales each row of a 2-d tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("l2_normalize", &[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("l2_normalize", format!("expected 2-d, got {s:?}")));
        }
        let n = s[1];
        let src = self.data(a);
        let tiny = T::of(1e-12);
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = vec![T::zero(); src.len()];
        for (r, row) in src.chunks(n.max(1)).enumerate().take(s[0]) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            norms.push(norm);
            for j in 0..n {
                out[r * n + j] = row[j] / norm;
            }
        }
        let value = Tensor::new(s, out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x: a.0, norms }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("sum", &[a])?;
        let mut acc = T::zero();
        for &v in self.data(a) {
            acc += v;
        }
        self.push("sum", Tensor::scalar(acc), Op::Sum(a.0), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("mean", &[a])?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty input"));
        }
        let mut acc = T::zero();
        for &v in self.data(a) {
            acc += v;
        }
        let value = Tensor::scalar(acc / T::of(n as f64));
        self.push("mean", value, Op::Mean(a.0), &[a])
    }

    /// Contiguous window `[offset, offset + len)` of the flattened input.
    pub fn slice(&mut self, a: Var, offset: usize, len: usize) -> Result<Var, TensorError> {
        self.check_inputs("slice", &[a])?;
        let total = self.value(a).numel();
        if offset + len > total {
            return Err(TensorError::invalid(
                "slice",
                format!("window {offset}..{} exceeds length {total}", offset + len),
            ));
        }
        let value = Tensor::from_vec(self.data(a)[offset..offset + len].to_vec());
        self.push("slice", value, Op::Slice { x: a.0, offset }, &[a])
    }

    /// Inverted dropout. Identity (no node recorded) in eval mode or when
    /// `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        self.check_inputs("dropout", &[a])?;
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x: a.0, mask }, &[a])
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check_inputs("cross_entropy", &[logits])?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err("cross_entropy", s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid("cross_entropy", format!("label {bad} >= {k}")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(k).enumerate() {
            softmax_row(row);
            total += -row[labels[r]].max(T::min_positive_value()).ln();
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Negates the off-diagonal entries of a square matrix: `z_ij * a_ij`
    /// with `z_ii = 1`, `z_ij = -1` otherwise.
    pub fn pairwise_sign(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("pairwise_sign", &[a])?;
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::invalid("pairwise_sign", format!("expected square, got {s:?}")));
        }
        let n = s[0];
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(idx, &x)| if idx / n == idx % n { x } else { -x })
            .collect();
        let value = Tensor::new(vec![n, n], data)?;
        self.push("pairwise_sign", value, Op::PairwiseSign(a.0), &[a])
    }

    /// Fused sigmoid pairwise loss evaluated in `chunk × chunk` blocks.
    ///
    /// `x, y: [B, D]`, `eta, zeta: [1]`. Returns
    /// `-(1/B) Σ_ij log σ(z_ij (eta x_i·y_j + zeta))`. Only one block of
    /// similarities is alive at any moment, both forward and backward.
    pub fn siglip_chunked(
        &mut self,
        x: Var,
        y: Var,
        eta: Var,
        zeta: Var,
        chunk: usize,
    ) -> Result<Var, TensorError> {
        self.check_inputs("siglip_chunked", &[x, y, eta, zeta])?;
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() != 2 || sx != sy {
            return Err(shape_err("siglip_chunked", sx, sy));
        }
        if self.value(eta).numel() != 1 || self.value(zeta).numel() != 1 {
            return Err(TensorError::invalid("siglip_chunked", "eta and zeta must be scalars"));
        }
        let (bsz, dim) = (sx[0], sx[1]);
        if chunk == 0 || chunk > bsz {
            return Err(TensorError::invalid(
                "siglip_chunked",
                format!("chunk size {chunk} outside 1..={bsz}"),
            ));
        }
        let (xd, yd) = (self.data(x), self.data(y));
        let (eta_v, zeta_v) = (self.data(eta)[0], self.data(zeta)[0]);
        let mut buf = SimilarityBuffer::<T>::new(chunk * chunk);
        let mut total = T::zero();
        for_each_block(bsz, chunk, |i0, bi, j0, bj| {
            let block = &mut buf.as_mut_slice()[..bi * bj];
            gemm(bi, dim, bj, &xd[i0 * dim..], false, &yd[j0 * dim..], true, block, false);
            for ii in 0..bi {
                for jj in 0..bj {
                    let l = eta_v * block[ii * bj + jj] + zeta_v;
                    let z = if i0 + ii == j0 + jj { l } else { -l };
                    total += kernels::log_sigmoid(z);
                }
            }
        });
        drop(buf);
        let value = Tensor::scalar(total * T::of(-1.0 / bsz as f64));
        self.push(
            "siglip_chunked",
            value,
            Op::SiglipChunked {
                x: x.0,
                y: y.0,
                eta: eta.0,
                zeta: zeta.0,
                chunk,
            },
            &[x, y, eta, zeta],
        )
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            self.backward_done = true;
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].grad, &[T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (j, d) in contribs {
                if self.nodes[j].requires_grad {
                    accumulate(&mut self.nodes[j].grad, &d);
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) {
                if let Some(g) = &n.grad {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFiniteGrad(i));
                    }
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let mut res = Vec::new();
        let elementwise = |a: usize, f: &dyn Fn(usize) -> T| -> (usize, Vec<T>) {
            (a, (0..g.len()).map(f).collect())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Identity(a) | Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    res.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[*a].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![T::zero(); r * c];
                for ii in 0..r {
                    for jj in 0..c {
                        da[ii * c + jj] = g[jj * r + ii];
                    }
                }
                res.push((*a, da));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    let period = self.nodes[*b].value.numel();
                    let mut db = vec![T::zero(); period];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % period] += gv;
                    }
                    res.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let period = bv.len();
                if self.needs(*a) {
                    res.push(elementwise(*a, &|idx| g[idx] * bv[idx % period]));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); period];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % period] += gv * av[idx];
                    }
                    res.push((*b, db));
                }
            }
            Op::Scale(a, c) => res.push(elementwise(*a, &|idx| g[idx] * *c)),
            Op::AddScalar(a) => res.push((*a, g.to_vec())),
            Op::Exp(a) => res.push(elementwise(*a, &|idx| g[idx] * out[idx])),
            Op::Log(a) => {
                let av = val(*a);
                res.push(elementwise(*a, &|idx| g[idx] / av[idx]));
            }
            Op::Neg(a) => res.push(elementwise(*a, &|idx| -g[idx])),
            Op::Gelu { x, slope } => {
                res.push(elementwise(*x, &|idx| g[idx] * slope[idx]));
            }
            Op::Sigmoid(a) => {
                res.push(elementwise(*a, &|idx| g[idx] * out[idx] * (T::one() - out[idx])));
            }
            Op::LogSigmoid(a) => {
                let av = val(*a);
                res.push(elementwise(*a, &|idx| g[idx] * kernels::sigmoid(-av[idx])));
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                let mut da = vec![T::zero(); g.len()];
                for r in 0..g.len() / n {
                    let (yr, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*a, da));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *node.value.shape().last().unwrap();
                let gm = val(*gamma);
                let rows = g.len() / n;
                let nt = T::of(n as f64);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = g[r * n + j] * gm[j];
                            s1 += dh;
                            s2 += dh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dh = g[r * n + j] * gm[j];
                            dx[r * n + j] = rstd[r] * (dh - s1 / nt - xhat[r * n + j] * s2 / nt);
                        }
                    }
                    res.push((*x, dx));
                }
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (idx, &gv) in g.iter().enumerate() {
                        dg[idx % n] += gv * xhat[idx];
                    }
                    res.push((*gamma, dg));
                }
                if self.needs(*beta) {
                    let mut db = vec![T::zero(); n];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                    res.push((*beta, db));
                }
            }
            Op::BatchNormApply {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            } => {
                let s = self.nodes[*x].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (xv, mu, va, gm) = (val(*x), val(*mean), val(*var), val(*gamma));
                let inv: Vec<T> = va.iter().map(|&v| T::one() / (v + *eps).sqrt()).collect();
                let mut dx = vec![T::zero(); g.len()];
                let mut dmean = vec![T::zero(); c];
                let mut dvar = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let half = T::of(0.5);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            let gv = g[base + p];
                            let centered = xv[base + p] - mu[ch];
                            dx[base + p] = gv * inv[ch] * gm[ch];
                            dmean[ch] -= gv * inv[ch] * gm[ch];
                            dvar[ch] -= gv * gm[ch] * centered * half * inv[ch] * inv[ch] * inv[ch];
                            dgamma[ch] += gv * centered * inv[ch];
                            dbeta[ch] += gv;
                        }
                    }
                }
                for (j, d) in [(*x, dx), (*mean, dmean), (*var, dvar), (*gamma, dgamma), (*beta, dbeta)] {
                    if self.needs(j) {
                        res.push((j, d));
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let s = self.nodes[*x].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gm = val(*gamma);
                let count = T::of((n * hw) as f64);
                let mut sum_dh = vec![T::zero(); c];
                let mut sum_dh_xhat = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            let gv = g[base + p];
                            let dh = gv * gm[ch];
                            sum_dh[ch] += dh;
                            sum_dh_xhat[ch] += dh * xhat[base + p];
                            dgamma[ch] += gv * xhat[base + p];
                            dbeta[ch] += gv;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                let dh = g[base + p] * gm[ch];
                                dx[base + p] = rstd[ch] / count
                                    * (count * dh - sum_dh[ch] - xhat[base + p] * sum_dh_xhat[ch]);
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    res.push((*beta, dbeta));
                }
            }
            Op::Conv2d { x, w, stride, cols } => {
                let sx = self.nodes[*x].value.shape();
                let sw = self.nodes[*w].value.shape();
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let o = sw[0];
                let plane = conv_out(h, *stride) * conv_out(wd, *stride);
                let kdim = c * 9;
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * kdim];
                    for i in 0..n {
                        let gi = &g[i * o * plane..(i + 1) * o * plane];
                        let col = &cols[i * kdim * plane..(i + 1) * kdim * plane];
                        gemm(o, plane, kdim, gi, false, col, true, &mut dw, true);
                    }
                    res.push((*w, dw));
                }
                if self.needs(*x) {
                    let wv = val(*w);
                    let mut dx = vec![T::zero(); n * c * h * wd];
                    let mut dcols = vec![T::zero(); kdim * plane];
                    for i in 0..n {
                        let gi = &g[i * o * plane..(i + 1) * o * plane];
                        gemm(kdim, o, plane, wv, true, gi, false, &mut dcols, false);
                        kernels::col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            *stride,
                            &mut dx[i * c * h * wd..(i + 1) * c * h * wd],
                        );
                    }
                    res.push((*x, dx));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[*x].value.shape();
                let hw = s[2] * s[3];
                let denom = T::of(hw as f64);
                let mut dx = vec![T::zero(); s.iter().product()];
                for (r, &gv) in g.iter().enumerate() {
                    let d = gv / denom;
                    dx[r * hw..(r + 1) * hw].iter_mut().for_each(|v| *v = d);
                }
                res.push((*x, dx));
            }
            Op::Embedding { table, ids } => {
                let s = self.nodes[*table].value.shape();
                let w = s[1];
                let mut dt = vec![T::zero(); s[0] * w];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        dt[id * w + j] += g[r * w + j];
                    }
                }
                res.push((*table, dt));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let s = node.value.shape();
                let (bsz, t, e) = (s[0], s[1], s[2]);
                let dh = e / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); g.len()];
                let mut dk = vec![T::zero(); g.len()];
                let mut dv = vec![T::zero(); g.len()];
                let mut dp = vec![T::zero(); t];
                for b in 0..bsz {
                    for h in 0..*heads {
                        for i in 0..t {
                            let prow = &probs[((b * heads + h) * t + i) * t..][..t];
                            let go = &g[(b * t + i) * e + h * dh..][..dh];
                            let mut dot = T::zero();
                            for j in 0..t {
                                if prow[j] == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                let vrow = &vd[(b * t + j) * e + h * dh..][..dh];
                                let mut acc = T::zero();
                                for d in 0..dh {
                                    acc += go[d] * vrow[d];
                                    dv[(b * t + j) * e + h * dh + d] += prow[j] * go[d];
                                }
                                dp[j] = acc;
                                dot += prow[j] * acc;
                            }
                            let qrow = &qd[(b * t + i) * e + h * dh..][..dh];
                            for j in 0..t {
                                if prow[j] == T::zero() {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let krow = &kd[(b * t + j) * e + h * dh..][..dh];
                                for d in 0..dh {
                                    dq[(b * t + i) * e + h * dh + d] += ds * krow[d];
                                    dk[(b * t + j) * e + h * dh + d] += ds * qrow[d];
                                }
                            }
                        }
                    }
                }
                for (j, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(j) {
                        res.push((j, d));
                    }
                }
            }
            Op::MeanRows(a) => {
                let s = self.nodes[*a].value.shape();
                let (r, n) = (s[0], s[1]);
                let denom = T::of(r as f64);
                let mut da = vec![T::zero(); r * n];
                for i in 0..r {
                    for j in 0..n {
                        da[i * n + j] = g[j] / denom;
                    }
                }
                res.push((*a, da));
            }
            Op::SelectRows { x, rows } => {
                let s = self.nodes[*x].value.shape();
                let n = s[1];
                let mut dx = vec![T::zero(); s[0] * n];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] += g[r * n + j];
                    }
                }
                res.push((*x, dx));
            }
            Op::L2Normalize { x, norms } => {
                let n = node.value.shape()[1];
                let mut dx = vec![T::zero(); g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                res.push((*x, dx));
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                res.push((*a, vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                res.push((*a, vec![g[0] / T::of(n as f64); n]));
            }
            Op::Slice { x, offset } => {
                let mut dx = vec![T::zero(); self.nodes[*x].value.numel()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                res.push((*x, dx));
            }
            Op::Dropout { x, mask } => res.push(elementwise(*x, &|idx| g[idx] * mask[idx])),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.nodes[*logits].value.shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * k + l] -= scale;
                }
                res.push((*logits, dl));
            }
            Op::PairwiseSign(a) => {
                let n = node.value.shape()[0];
                res.push(elementwise(*a, &|idx| if idx / n == idx % n { g[idx] } else { -g[idx] }));
            }
            Op::SiglipChunked {
                x,
                y,
                eta,
                zeta,
                chunk,
            } => {
                let s = self.nodes[*x].value.shape();
                let (bsz, dim) = (s[0], s[1]);
                let (xd, yd) = (val(*x), val(*y));
                let (eta_v, zeta_v) = (val(*eta)[0], val(*zeta)[0]);
                let coef = g[0] * T::of(-1.0 / bsz as f64);
                let mut dx = vec![T::zero(); bsz * dim];
                let mut dy = vec![T::zero(); bsz * dim];
                let mut deta = T::zero();
                let mut dzeta = T::zero();
                let mut buf = SimilarityBuffer::<T>::new(chunk * chunk);
                for_each_block(bsz, *chunk, |i0, bi, j0, bj| {
                    let block = &mut buf.as_mut_slice()[..bi * bj];
                    gemm(bi, dim, bj, &xd[i0 * dim..], false, &yd[j0 * dim..], true, block, false);
                    for ii in 0..bi {
                        for jj in 0..bj {
                            let sim = block[ii * bj + jj];
                            let l = eta_v * sim + zeta_v;
                            let sign = if i0 + ii == j0 + jj { T::one() } else { -T::one() };
                            // d/dl log σ(sign * l) = sign * σ(-sign * l)
                            let dl = coef * sign * kernels::sigmoid(-sign * l);
                            dzeta += dl;
                            deta += dl * sim;
                            block[ii * bj + jj] = dl * eta_v;
                        }
                    }
                    gemm(bi, bj, dim, block, false, &yd[j0 * dim..], false, &mut dx[i0 * dim..], true);
                    gemm(bj, bi, dim, block, true, &xd[i0 * dim..], false, &mut dy[j0 * dim..], true);
                });
                for (j, d) in [(*x, dx), (*y, dy), (*eta, vec![deta]), (*zeta, vec![dzeta])] {
                    if self.needs(j) {
                        res.push((j, d));
                    }
                }
            }
        }
        res
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, d: &[T]) {
    match slot {
        Some(g) => g.iter_mut().zip(d).for_each(|(a, &b)| *a += b),
        None => *slot = Some(d.to_vec()),
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v = *v / denom;
    }
}

/// Per-channel mean and biased variance of an `[N, C, HW]` buffer.
pub(crate) fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            for &v in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                mean[ch] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for i in 0..n {
        for ch in 0..c {
            for &v in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                let d = v - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|s| *s = *s / count);
    (mean, var)
}

fn for_each_block(n: usize, chunk: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let mut i0 = 0;
    while i0 < n {
        let bi = chunk.min(n - i0);
        let mut j0 = 0;
        while j0 < n {
            let bj = chunk.min(n - j0);
            f(i0, bi, j0, bj);
            j0 += bj;
        }
        i0 += bi;
    }
}
