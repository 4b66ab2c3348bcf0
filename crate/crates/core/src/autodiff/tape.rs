use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, Window};
use super::{Real, Tensor, PROB_EPSILON};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding mode for convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; preserves H and W at stride 1.
    Same,
    Valid,
}

/// How a loss reduces over the samples of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: Window,
        filters: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: Axis,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        input: Var,
        axis: Axis,
        start: usize,
        len: usize,
    },
    Add(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Sum(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Bce {
        probs: Var,
        targets: Vec<T>,
        scale: T,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
        scale: T,
    },
}

/// A shape viewed as `[outer, len, inner]` around one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Axis {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Values on the tape may borrow from tensors that outlive it (`'a`), which
/// is how model parameters enter a training step without a copy. A tape is
/// single-owner: it is neither shared nor locked.
pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned tensor as a leaf.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), requires_grad, Op::Leaf)
    }

    /// Records a borrowed tensor as a leaf without copying its data.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value (and its gradient, if any) out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t =
            Tensor::new(node.shape.clone(), node.value.to_vec()).expect("tape values always match their shapes");
        t.set_requires_grad(node.requires_grad);
        t.set_grad(node.grad.clone()).expect("grad shape matches value");
        t
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation of `[N, C, H, W]` with a `[F, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::shape("conv2d (odd kernel)", &xs, &ks));
        }
        if bs != [ks[0]] {
            return Err(Error::shape("conv2d bias", &bs, &ks[..1]));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let pad = match padding {
            Padding::Same => (kh - 1) / 2,
            Padding::Valid => 0,
        };
        if matches!(padding, Padding::Same) && kh != kw {
            return Err(Error::shape("conv2d (same padding needs square kernel)", &xs, &ks));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d (kernel larger than input)", &xs, &ks));
        }
        let geom = Window {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride: 1,
            pad,
            out_h: h + 2 * pad - kh + 1,
            out_w: w + 2 * pad - kw + 1,
        };
        let ckk = c * kh * kw;
        let op = geom.out_pixels();
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let mut out = vec![T::zero(); n * f * op];
        // One sample at a time keeps the unfolded block in cache, and its
        // [F, P] product is already the NCHW layout of that sample.
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * op }];
        for ni in 0..n {
            let sample = &x[ni * c * h * w..][..c * h * w];
            let cols: &[T] = if geom.is_pointwise() {
                sample
            } else {
                kernels::im2col(sample, &geom, &mut cols);
                &cols
            };
            let dst = &mut out[ni * f * op..][..f * op];
            for (fi, row) in dst.chunks_exact_mut(op).enumerate() {
                row.fill(b[fi]);
            }
            kernels::matmul(f, ckk, op, k, false, cols, false, dst, true);
        }
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            vec![n, f, geom.out_h, geom.out_w],
            Cow::Owned(out),
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                filters: f,
            },
        ))
    }

    /// Max pooling over `[N, C, H, W]`.
    ///
    /// With [`Padding::Valid`] the window must tile the input exactly.
    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || window == 0 || stride == 0 {
            return Err(Error::shape("max_pool2d", &xs, &[window, stride]));
        }
        let pad = match padding {
            Padding::Same => (window - 1) / 2,
            Padding::Valid => 0,
        };
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let fits = |d: usize| d + 2 * pad >= window && (d + 2 * pad - window) % stride == 0;
        if !fits(h) || !fits(w) {
            return Err(Error::shape("max_pool2d", &xs, &[window, stride]));
        }
        let geom = Window {
            n,
            c,
            h,
            w,
            kh: window,
            kw: window,
            stride,
            pad,
            out_h: (h + 2 * pad - window) / stride + 1,
            out_w: (w + 2 * pad - window) / stride + 1,
        };
        let total = n * c * geom.out_pixels();
        let mut out = vec![T::zero(); total];
        let mut argmax = vec![0u32; total];
        kernels::max_pool(self.value(input), &geom, &mut out, &mut argmax);
        let rg = self.rg(&[input]);
        Ok(self.push(
            vec![n, c, geom.out_h, geom.out_w],
            Cow::Owned(out),
            rg,
            Op::MaxPool { input, argmax },
        ))
    }

    /// Affine map `input · weight + bias` for `[N, D] · [D, M]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", &xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("dense bias", &bs, &ws[1..]));
        }
        let (rows, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); rows * d_out];
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(self.value(bias));
        }
        kernels::matmul(
            rows,
            d_in,
            d_out,
            self.value(input),
            false,
            self.value(weight),
            false,
            &mut out,
            true,
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            vec![rows, d_out],
            Cow::Owned(out),
            rg,
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                d_in,
                d_out,
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, Cow::Owned(out), rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax axis", &shape, &[axis]));
        }
        let ax = Axis::of(&shape, axis);
        let mut out = self.value(x).to_vec();
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let idx = |j: usize| (o * ax.len + j) * ax.inner + i;
                let max = (0..ax.len).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..ax.len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..ax.len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Softmax { input: x, axis: ax }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat axis", &base, &[axis]));
        }
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let agrees =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::shape("concat", &base, s));
            }
            parts.push((x, s[axis]));
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(x, len) in &parts {
                out.extend_from_slice(&self.value(x)[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::Concat {
                inputs: parts,
                outer,
                inner,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let ax = Axis::of(&shape, axis);
        let mut out = Vec::with_capacity(ax.outer * len * ax.inner);
        let v = self.value(x);
        for o in 0..ax.outer {
            out.extend_from_slice(&v[(o * ax.len + start) * ax.inner..][..len * ax.inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            new_shape,
            Cow::Owned(out),
            rg,
            Op::Narrow {
                input: x,
                axis: ax,
                start,
                len,
            },
        ))
    }

    /// Splits along `axis` into pieces of the given lengths.
    pub fn split(&mut self, x: Var, axis: usize, lengths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(lengths.len());
        for &len in lengths {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        let dim = self.shape(x).get(axis).copied().unwrap_or(0);
        if start != dim {
            return Err(Error::shape("split", self.shape(x), lengths));
        }
        Ok(out)
    }

    /// Element-wise sum of identically shaped tensors; invariant under
    /// permutation of `xs`.
    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Usage("add of zero tensors".into()));
        };
        let shape = self.shape(first).to_vec();
        for &x in &xs[1..] {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::shape("add", &shape, self.shape(x)));
            }
        }
        let mut out = self.value(first).to_vec();
        if xs.len() == 2 {
            for (o, &v) in out.iter_mut().zip(self.value(xs[1])) {
                *o = *o + v;
            }
        } else if xs.len() > 2 {
            // Terms are summed in ascending order so the result does not
            // depend on the order of the operands.
            let mut terms = Vec::with_capacity(xs.len());
            for (i, o) in out.iter_mut().enumerate() {
                terms.clear();
                terms.extend(xs.iter().map(|&x| self.nodes[x.0].value[i]));
                terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                *o = terms.iter().fold(T::zero(), |acc, &t| acc + t);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Add(xs.to_vec())))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, Cow::Owned(out), rg, Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Reshape(x)))
    }

    /// `[N, ...]` → `[N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, [n, rest])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], Cow::Owned(vec![total]), rg, Op::Sum(x))
    }

    /// Inverted dropout. Identity (same handle) outside training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Dropout { input: x, mask }))
    }

    /// Binary cross-entropy of probabilities against 0/1 targets.
    ///
    /// Probabilities are clamped to `[ε, 1 − ε]`; the gradient is zero where
    /// the clamp is active.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[T], reduction: Reduction) -> Result<Var> {
        let numel = self.value(probs).len();
        if targets.len() != numel {
            return Err(Error::shape(
                "binary_cross_entropy",
                self.shape(probs),
                &[targets.len()],
            ));
        }
        let eps = T::from_f64_lossy(PROB_EPSILON);
        let one = T::one();
        let scale = match reduction {
            Reduction::Mean => one / T::from_usize(numel).expect("batch size fits"),
            Reduction::Sum => one,
        };
        let total: T = self
            .value(probs)
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(one - eps);
                y * p.ln() + (one - y) * (one - p).ln()
            })
            .sum();
        let loss = -total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("binary_cross_entropy"));
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            rg,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                scale,
            },
        ))
    }

    /// Softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("class index {bad} out of range for {k} classes")));
        }
        let eps = T::from_f64_lossy(PROB_EPSILON);
        let one = T::one();
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_exact_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
            total = total + row[label].max(eps).min(one - eps).ln();
        }
        let scale = match reduction {
            Reduction::Mean => one / T::from_usize(n).expect("batch size fits"),
            Reduction::Sum => one,
        };
        let loss = -total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy"));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
                classes: k,
                scale,
            },
        ))
    }

    /// Propagates adjoints from a scalar `loss` to every leaf that requires a
    /// gradient. Leaf gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let slot = |grads: &mut [Option<Vec<T>>], v: Var| -> Option<usize> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        macro_rules! buf {
            ($v:expr) => {
                match slot(grads, $v) {
                    Some(idx) => Some(grads[idx].as_mut().expect("slot allocated")),
                    None => None,
                }
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are collected, not propagated"),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                filters,
            } => {
                let f = *filters;
                let (n, op) = (nodes[input.0].shape[0], geom.out_pixels());
                let ckk = geom.c * geom.kh * geom.kw;
                let in_len = geom.c * geom.h * geom.w;
                if let Some(db) = buf!(*bias) {
                    for (j, row) in g.chunks_exact(op).enumerate() {
                        let fi = j % f;
                        db[fi] = db[fi] + row.iter().copied().sum();
                    }
                }
                let x = &nodes[input.0].value;
                let k = &nodes[kernel.0].value;
                let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * op }];
                if nodes[kernel.0].requires_grad {
                    let dk = buf!(*kernel).expect("kernel requires grad");
                    for ni in 0..n {
                        let sample = &x[ni * in_len..][..in_len];
                        let cols: &[T] = if geom.is_pointwise() {
                            sample
                        } else {
                            kernels::im2col(sample, geom, &mut cols);
                            &cols
                        };
                        kernels::matmul(f, op, ckk, &g[ni * f * op..][..f * op], false, cols, true, dk, true);
                    }
                }
                if let Some(dx) = buf!(*input) {
                    for ni in 0..n {
                        let dy = &g[ni * f * op..][..f * op];
                        let dxs = &mut dx[ni * in_len..][..in_len];
                        if geom.is_pointwise() {
                            kernels::matmul(ckk, f, op, k, true, dy, false, dxs, true);
                        } else {
                            kernels::matmul(ckk, f, op, k, true, dy, false, &mut cols, false);
                            kernels::col2im_add(&cols, geom, dxs);
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(dx) = buf!(*input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] = dx[src as usize] + gv;
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                d_in,
                d_out,
            } => {
                let (n, d, m) = (*rows, *d_in, *d_out);
                if let Some(db) = buf!(*bias) {
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                if let Some(dw) = buf!(*weight) {
                    kernels::matmul(d, n, m, &nodes[input.0].value, true, g, false, dw, true);
                }
                if let Some(dx) = buf!(*input) {
                    kernels::matmul(n, m, d, g, false, &nodes[weight.0].value, true, dx, true);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = buf!(*x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.iter()) {
                        if y > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = buf!(*x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.iter()) {
                        *d = *d + gv * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax { input, axis } => {
                if let Some(dx) = buf!(*input) {
                    let ax = *axis;
                    for o in 0..ax.outer {
                        for inner in 0..ax.inner {
                            let idx = |j: usize| (o * ax.len + j) * ax.inner + inner;
                            let dot: T = (0..ax.len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..ax.len {
                                let k = idx(j);
                                dx[k] = dx[k] + out[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = inputs.iter().map(|&(_, len)| len).sum();
                let mut offset = 0;
                for &(x, len) in inputs {
                    if let Some(dx) = buf!(x) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut dx[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                if let Some(dx) = buf!(*input) {
                    let ax = *axis;
                    for o in 0..ax.outer {
                        let src = &g[o * len * ax.inner..][..len * ax.inner];
                        let dst = &mut dx[(o * ax.len + start) * ax.inner..][..len * ax.inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::Add(xs) => {
                for &x in xs {
                    if let Some(dx) = buf!(x) {
                        dx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = buf!(*a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(vb.iter()) {
                        *d = *d + gv * y;
                    }
                }
                if let Some(db) = buf!(*b) {
                    for ((d, &gv), &y) in db.iter_mut().zip(g).zip(va.iter()) {
                        *d = *d + gv * y;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * *factor);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(dx) = buf!(*input) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gv * m;
                    }
                }
            }
            Op::Bce { probs, targets, scale } => {
                let eps = T::from_f64_lossy(PROB_EPSILON);
                let one = T::one();
                let vp = &nodes[probs.0].value;
                if let Some(dp) = buf!(*probs) {
                    for ((d, &p), &y) in dp.iter_mut().zip(vp.iter()).zip(targets) {
                        if p > eps && p < one - eps {
                            *d = *d - g[0] * *scale * (y / p - (one - y) / (one - p));
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
                classes,
                scale,
            } => {
                let eps = T::from_f64_lossy(PROB_EPSILON);
                let one = T::one();
                if let Some(dl) = buf!(*logits) {
                    for ((drow, prow), &label) in dl
                        .chunks_exact_mut(*classes)
                        .zip(probs.chunks_exact(*classes))
                        .zip(labels)
                    {
                        let py = prow[label];
                        if !(py > eps && py < one - eps) {
                            continue;
                        }
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == label { one } else { T::zero() };
                            *d = *d + g[0] * *scale * (p - target);
                        }
                    }
                }
            }
        }
    }
}
