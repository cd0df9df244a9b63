use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Option<Vec<Vec<T>>>,
    },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var, planes: usize, height: usize, width: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Relu { x: Var },
    SoftmaxCe { logits: Var, probs: Vec<T>, target: Vec<usize>, classes: usize, plane: usize },
    SliceAxis1 { x: Var, start: usize },
    ConcatAxis1 { parts: Vec<Var> },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    TokenLinear { x: Var, w: Var, bias: Var, batch: usize, t: usize, h: usize, d: usize },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    MeanAxis { x: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample_bilinear2",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::SliceAxis1 { .. } => "split_channels",
            Op::ConcatAxis1 { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::TokenLinear { .. } => "token_linear",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, bias, .. } => vec![*x, *w, *bias],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::TokenLinear { x, w, bias, .. } => vec![*x, *w, *bias],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::ConcatAxis1 { parts } => parts.clone(),
            Op::MaxPool2 { x, .. }
            | Op::Upsample2 { x, .. }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::SliceAxis1 { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::MeanAxis { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a topological order: every
/// operator's inputs exist before it does.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(outer, axis extent, inner)` around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` receive a gradient from
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Operator name of every node, in topological order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn expect_rank(&self, v: Var, rank: usize, op: &str) -> Result<&[usize]> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(Error::shape(format!(
                "{op} expects a rank-{rank} tensor, got shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    /// `[M×K]·[K×N] → [M×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank(a, 2, "matmul")?.to_vec();
        let sb = self.expect_rank(b, 2, "matmul")?.to_vec();
        if sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {sa:?} · {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, value))
    }

    /// Cross-correlation of `[B×C×H×W]` with `[O×C×k×k]` filters plus a
    /// per-filter bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.expect_rank(x, 4, "conv2d")?.to_vec();
        let sw = self.expect_rank(w, 4, "conv2d weight")?.to_vec();
        let sb = self.shape(bias).to_vec();
        if sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape(format!(
                "conv2d weight {sw:?} incompatible with input {sx:?}"
            )));
        }
        if sb != [sw[0]] {
            return Err(Error::shape(format!(
                "conv2d bias {sb:?} must have {} entries",
                sw[0]
            )));
        }
        let k = sw[2];
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let out_extent = |extent: usize| -> Result<usize> {
            let padded = extent + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::config(format!(
                    "conv2d output extent is not integral: ({extent} + 2·{pad} − {k}) / {stride}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kernel: k,
            stride,
            pad,
            out_h: out_extent(sx[2])?,
            out_w: out_extent(sx[3])?,
        };
        // The unfolded input is kept for the weight gradient.
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            self.nodes[w.0].requires_grad,
        );
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.push(Op::Conv2d { x, w, bias, geom, cols }, value))
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 4, "maxpool2")?.to_vec();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::config(format!(
                "maxpool2 needs even spatial extents, got {}×{}",
                s[2], s[3]
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(s[0] * s[1], s[2], s[3], self.value(x).data());
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    /// ×2 bilinear upsampling (half-pixel centres, edge clamped).
    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 4, "upsample_bilinear2")?.to_vec();
        let planes = s[0] * s[1];
        let out = kernels::upsample2_forward(planes, s[2], s[3], self.value(x).data());
        let value = Tensor::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        Ok(self.push(
            Op::Upsample2 {
                x,
                planes,
                height: s[2],
                width: s[3],
            },
            value,
        ))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().expect("tensors have rank >= 1");
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::shape(format!(
                    "layernorm {name} has shape {:?}, expected [{d}]",
                    self.shape(p)
                )));
            }
        }
        if eps <= 0.0 {
            return Err(Error::config("layernorm eps must be positive"));
        }
        let (y, xhat, rstd) = kernels::layernorm_forward(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(eps),
        );
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(Op::Gelu { x }, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, value)
    }

    /// Mean pixelwise cross-entropy of `[B×K×H×W]` logits against class ids
    /// laid out as `[B×H×W]`.
    pub fn softmax_ce(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let s = self.expect_rank(logits, 4, "softmax_ce")?.to_vec();
        let (batch, classes, plane) = (s[0], s[1], s[2] * s[3]);
        if target.len() != batch * plane {
            return Err(Error::shape(format!(
                "softmax_ce target has {} entries, logits {s:?} need {}",
                target.len(),
                batch * plane
            )));
        }
        if let Some((i, &t)) = target.iter().enumerate().find(|(_, &t)| t >= classes) {
            return Err(Error::Data(format!(
                "class id {t} at pixel {i} is outside [0, {classes})"
            )));
        }
        let (probs, total) =
            kernels::softmax_nll(self.value(logits).data(), batch, classes, plane, target);
        let count = T::from_f64((batch * plane) as f64);
        let value = Tensor::scalar(total / count);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                probs,
                target: target.to_vec(),
                classes,
                plane,
            },
            value,
        ))
    }

    /// Copies channels `[start, end)` of axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start >= end || end > s[1] {
            return Err(Error::config(format!(
                "channel range [{start}, {end}) invalid for shape {s:?}"
            )));
        }
        let (outer, ch, inner) = around_axis(&s, 1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * ch + start) * inner..(o * ch + end) * inner]);
        }
        let mut shape = s;
        shape[1] = end - start;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::SliceAxis1 { x, start }, value))
    }

    /// Splits axis 1 at strictly increasing interior `boundaries`.
    pub fn split_channels(&mut self, x: Var, boundaries: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("split_channels needs rank >= 2, got {s:?}")));
        }
        let channels = s[1];
        let mut prev = 0;
        for &b in boundaries {
            if b <= prev || b >= channels {
                return Err(Error::config(format!(
                    "split boundaries {boundaries:?} must increase strictly within (0, {channels})"
                )));
            }
            prev = b;
        }
        let mut edges = Vec::with_capacity(boundaries.len() + 2);
        edges.push(0);
        edges.extend_from_slice(boundaries);
        edges.push(channels);
        edges
            .windows(2)
            .map(|w| self.slice_channels(x, w[0], w[1]))
            .collect()
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels needs at least one part"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape(format!("concat_channels needs rank >= 2, got {s0:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(format!(
                    "concat_channels parts disagree: {s0:?} vs {s:?}"
                )));
            }
            channels += s[1];
        }
        let (outer, _, inner) = around_axis(&s0, 1);
        let mut out = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::ConcatAxis1 {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op} operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    /// Adds a `[d]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("tensors have rank >= 1");
        if self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::AddBias { x, bias }, value))
    }

    /// Dense map along the second-to-last axis: `x[..., T, d]` with
    /// `w[T×h]`, `bias[h]` gives `y[..., h, d] = wᵀ·x + bias`, i.e.
    /// `transpose(linear(transpose(x), w, bias))` without the copies.
    pub fn token_linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sw = self.expect_rank(w, 2, "token_linear weight")?.to_vec();
        if s.len() < 2 || s[s.len() - 2] != sw[0] || self.shape(bias) != [sw[1]] {
            return Err(Error::shape(format!(
                "token_linear: input {s:?}, weight {sw:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let (t, h, d) = (sw[0], sw[1], s[s.len() - 1]);
        let batch = self.value(x).numel() / (t * d);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        let mut out = vec![T::zero(); batch * h * d];
        for (n, yn) in out.chunks_mut(h * d).enumerate() {
            for (row, &b) in yn.chunks_mut(d).zip(bd) {
                row.fill(b);
            }
            T::gemm(h, t, d, wd, (1, h), &xd[n * t * d..(n + 1) * t * d], (d, 1), T::one(), yn);
        }
        let mut shape = s;
        let rank = shape.len();
        shape[rank - 2] = h;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::TokenLinear {
                x,
                w,
                bias,
                batch,
                t,
                h,
                d,
            },
            value,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Averages over `axis`, removing it (rank-1 inputs collapse to `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = around_axis(&s, axis);
        let src = self.value(x).data();
        let denom = T::from_f64(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / denom);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MeanAxis { x, axis }, value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "{perm:?} is not a permutation of the axes of {s:?}"
            )));
        }
        let data = kernels::permute(self.value(x).data(), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            value,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// `x[..., K] · w[K×N] (+ bias[N]) → [..., N]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().expect("tensors have rank >= 1");
        let rows = self.value(x).numel() / k;
        let flat = self.reshape(x, &[rows, k])?;
        let y = self.matmul(flat, w)?;
        let n = self.shape(y)[1];
        let y = match bias {
            Some(b) => self.add_bias(y, b)?,
            None => y,
        };
        let mut out_shape = s;
        *out_shape.last_mut().expect("nonempty") = n;
        self.reshape(y, &out_shape)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Overwrites the gradient of every `requires_grad` leaf reachable from
    /// `loss`; intermediate gradients are released as soon as they have been
    /// propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            for (input, contrib) in self.input_grads(i, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, (n, 1), self.value(*b).data(), (1, n), T::zero(), &mut da);
                    out.push((*a, like(*a, da)?));
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), (1, k), gd, (n, 1), T::zero(), &mut db);
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    cols.as_deref(),
                    (wants(x), wants(w), wants(bias)),
                );
                for (v, d) in [(*x, dx), (*w, dw), (*bias, db)] {
                    if let Some(d) = d {
                        out.push((v, like(v, d)?));
                    }
                }
            }
            Op::TokenLinear {
                x,
                w,
                bias,
                batch,
                t,
                h,
                d,
            } => {
                let (batch, t, h, d) = (*batch, *t, *h, *d);
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if wants(x) {
                    let mut dx = vec![T::zero(); batch * t * d];
                    for (n, dxn) in dx.chunks_mut(t * d).enumerate() {
                        T::gemm(t, h, d, wd, (h, 1), &gd[n * h * d..(n + 1) * h * d], (d, 1), T::zero(), dxn);
                    }
                    out.push((*x, like(*x, dx)?));
                }
                if wants(w) {
                    let mut dw = vec![T::zero(); t * h];
                    for n in 0..batch {
                        let gn = &gd[n * h * d..(n + 1) * h * d];
                        T::gemm(t, d, h, &xd[n * t * d..(n + 1) * t * d], (d, 1), gn, (1, d), T::one(), &mut dw);
                    }
                    out.push((*w, like(*w, dw)?));
                }
                if wants(bias) {
                    let mut db = vec![T::zero(); h];
                    for (i, row) in gd.chunks(d).enumerate() {
                        db[i % h] = db[i % h] + row.iter().copied().sum::<T>();
                    }
                    out.push((*bias, like(*bias, db)?));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] = dx[src] + gv;
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Upsample2 {
                x,
                planes,
                height,
                width,
            } => {
                let dx = kernels::upsample2_backward(*planes, *height, *width, gd);
                out.push((*x, like(*x, dx)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let (dx, dgamma, dbeta) =
                    kernels::layernorm_backward(gd, d, self.value(*gamma).data(), xhat, rstd);
                for (v, data) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if wants(&v) {
                        out.push((v, like(v, data)?));
                    }
                }
            }
            Op::Gelu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| gv * kernels::gelu_grad(v))
                    .collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::SoftmaxCe {
                logits,
                probs,
                target,
                classes,
                plane,
            } => {
                let count = target.len();
                let scale = gd[0] / T::from_f64(count as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (idx, &t) in target.iter().enumerate() {
                    let (b, p) = (idx / plane, idx % plane);
                    let at = (b * classes + t) * plane + p;
                    dl[at] = dl[at] - scale;
                }
                out.push((*logits, like(*logits, dl)?));
            }
            Op::SliceAxis1 { x, start } => {
                let sx = self.shape(*x);
                let (outer, ch, inner) = around_axis(sx, 1);
                let width = node.value.shape()[1];
                let mut dx = vec![T::zero(); outer * ch * inner];
                for o in 0..outer {
                    dx[(o * ch + start) * inner..(o * ch + start + width) * inner]
                        .copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::ConcatAxis1 { parts } => {
                let (outer, total, inner) = around_axis(node.value.shape(), 1);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if wants(&p) {
                        let mut dp = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[start..start + c * inner]);
                        }
                        out.push((p, like(p, dp)?));
                    }
                    offset += c;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(&v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    out.push((*a, like(*a, d)?));
                }
                if wants(b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::AddBias { x, bias } => {
                if wants(x) {
                    out.push((*x, g.clone()));
                }
                if wants(bias) {
                    let d = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); d];
                    for row in gd.chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((*bias, like(*bias, db)?));
                }
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.map(|v| v * *factor).reshape(self.shape(*x))?));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.shape(*x), gd[0])));
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = around_axis(self.shape(*x), *axis);
                let denom = T::from_f64(len as f64);
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let row = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        dx.extend(row.iter().map(|&v| v / denom));
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(self.shape(*x))?));
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let dx = kernels::permute(gd, node.value.shape(), &inv);
                out.push((*x, like(*x, dx)?));
            }
        }
        Ok(out)
    }
}
