//! Gradient tape: every differentiable operation appends a node holding its
//! value and the inputs needed to form adjoints. Nodes are appended in
//! execution order, so the node list is already topologically sorted.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::attention;
use crate::kernels::{self, inverse_axes};
use crate::tensor::numel;
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Rotate {
        x: Var,
        angles: Tensor<T>,
        inverse: bool,
    },
    Resize(Var),
    CrossEntropy {
        logits: Var,
        target: Arc<Vec<u32>>,
        ignore_index: u32,
        counted: usize,
    },
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    DecayedAttention {
        q: Var,
        k: Var,
        v: Var,
        d: Var,
        scale: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Rotate { .. } => "rotate_pairs",
            Op::Resize(..) => "bilinear_resize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::DecayedAttention { .. } => "decayed_attention",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Result of [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Pixels that contributed to the mean.
    pub counted: usize,
}

impl CrossEntropy {
    /// True when every pixel carried the ignore label; the loss is then 0.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

/// A single forward pass worth of recorded operations. Confined to one thread.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
        }
    }

    /// When set, every operation scans its output and errors on NaN/Inf.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Records a leaf that does not receive a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite.get() {
            if let Err(TensorError::NonFinite { index, value, .. }) = value.validate() {
                return Err(TensorError::NonFinite {
                    index,
                    value,
                    op: Some(op.name()),
                });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[a.0].value)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| kernels::binary("add", x, y, |p, q| p + q))?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| kernels::binary("sub", x, y, |p, q| p - q))?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| kernels::binary("mul", x, y, |p, q| p * q))?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let v = self.with1(a, |x| x.map(|p| p * c));
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; batch axes broadcast.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, kernels::matmul)?;
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.with1(a, |x| kernels::permute(x, axes))?;
        self.push(v, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.with1(a, |x| x.rank());
        if rank < 2 {
            return Err(TensorError::Invalid(format!("transpose needs rank >= 2, got {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.with1(a, |x| x.reshape(shape))?;
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.with1(a, |x| kernels::softmax(x, axis))?;
        self.push(v, Op::Softmax(a, axis), &[a])
    }

    /// `(softmax(q k^T * scale) ⊙ d) v` over the last two axes, fused row by
    /// row. `q`, `k`, `v` share their batch axes; `d` is `[.., n, m]` and
    /// broadcasts over them.
    pub fn decayed_attention(&self, q: Var, k: Var, v: Var, d: Var, scale: T) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let val = |x: Var| &nodes[x.0].value;
            attention::decayed_attention(val(q), val(k), val(v), val(d), scale)?
        };
        self.push(out, Op::DecayedAttention { q, k, v, d, scale }, &[q, k, v, d])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = self.with1(a, |x| Tensor::scalar(x.data().iter().copied().sum()));
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let v = self.with1(a, |x| {
            let n = T::lit(x.numel().max(1) as f64);
            Tensor::scalar(x.data().iter().copied().sum::<T>() / n)
        });
        self.push(v, Op::Mean(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let v = self.with1(a, |x| x.map(kernels::gelu));
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (v, means, rstds) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let c = *xv.shape().last().unwrap_or(&0);
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
            let (out, means, rstds) = kernels::layer_norm(xv.data(), gv.data(), bv.data(), eps);
            (Tensor::from_parts(xv.shape().to_vec(), out), means, rstds)
        };
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            &[x, gamma, beta],
        )
    }

    /// Rotates channel pairs of `[.., N, d]` by the `[N, d/2]` angle table.
    /// `inverse` rotates by the negated angles.
    pub fn rotate_pairs(&self, x: Var, angles: &Tensor<T>, inverse: bool) -> Result<Var> {
        let v = self.with1(x, |t| kernels::rotate_pairs(t, angles, inverse))?;
        self.push(
            v,
            Op::Rotate {
                x,
                angles: angles.clone(),
                inverse,
            },
            &[x],
        )
    }

    /// Bilinear resize of the trailing `[h, w]` axes, half-pixel centers.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = self.with1(x, |t| kernels::bilinear_resize(t, out_h, out_w))?;
        self.push(v, Op::Resize(x), &[x])
    }

    /// 1x1 convolution: `x [c_in, h, w]`, `w [c_out, c_in]`, `b [c_out]`.
    /// Computed as a matmul over the flattened spatial axis.
    pub fn pointwise_conv(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "pointwise_conv",
                lhs: xs,
                rhs: ws,
            });
        }
        let flat = self.reshape(x, &[xs[0], xs[1] * xs[2]])?;
        let y = self.matmul(w, flat)?;
        let bias = self.reshape(b, &[ws[0], 1])?;
        let y = self.add(y, bias)?;
        self.reshape(y, &[ws[0], xs[1], xs[2]])
    }

    /// Mean negative log-softmax over pixels of `[n_cls, h, w]` logits whose
    /// target is not `ignore_index`.
    pub fn cross_entropy(&self, logits: Var, target: &[u32], ignore_index: u32) -> Result<CrossEntropy> {
        let (value, counted) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            if lv.rank() != 3 || lv.shape()[1] * lv.shape()[2] != target.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: lv.shape().to_vec(),
                    rhs: vec![target.len()],
                });
            }
            let (k, w) = (lv.shape()[0], lv.shape()[2]);
            let hw = target.len();
            let ld = lv.data();
            let mut total = 0.0f64;
            let mut counted = 0usize;
            for (p, &t) in target.iter().enumerate() {
                if t == ignore_index {
                    continue;
                }
                if t as usize >= k {
                    return Err(TensorError::LabelOutOfRange {
                        label: t,
                        y: p / w,
                        x: p % w,
                        n_cls: k,
                    });
                }
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(ld[c * hw + p]);
                }
                let mut s = T::zero();
                for c in 0..k {
                    s += (ld[c * hw + p] - mx).exp();
                }
                let lse = mx + s.ln();
                total += (lse - ld[t as usize * hw + p]).as_f64();
                counted += 1;
            }
            let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
            (Tensor::scalar(T::lit(mean)), counted)
        };
        let loss = self.push(
            value,
            Op::CrossEntropy {
                logits,
                target: Arc::new(target.to_vec()),
                ignore_index,
                counted,
            },
            &[logits],
        )?;
        Ok(CrossEntropy { loss, counted })
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            kernels::concat(&refs, axis)?
        };
        self.push(v, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.with1(x, |t| kernels::narrow(t, axis, start, len))?;
        self.push(v, Op::Narrow { x, axis, start }, &[x])
    }

    /// Reverse-mode sweep from a single-element `loss`. Returns gradients for
    /// every leaf that requires grad and is reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lshape = nodes[loss.0].value.shape();
        if numel(lshape) != 1 {
            return Err(TensorError::NonScalarLoss(lshape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaf_grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, contrib: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let out_shape = node.value.shape();

            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::from_parts(out_shape.to_vec(), g));
                }
                Op::Add(a, b) => {
                    acc(*a, kernels::reduce_to_shape(&g, out_shape, val(*a).shape()));
                    acc(*b, kernels::reduce_to_shape(&g, out_shape, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, kernels::reduce_to_shape(&g, out_shape, val(*a).shape()));
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    acc(*b, kernels::reduce_to_shape(&neg, out_shape, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        acc(*a, mul_adjoint(&g, out_shape, av.shape(), bv));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, mul_adjoint(&g, out_shape, bv.shape(), av));
                    }
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(
                        val(*a),
                        val(*b),
                        &g,
                        nodes[a.0].requires_grad,
                        nodes[b.0].requires_grad,
                    )?;
                    if let Some(ga) = ga {
                        acc(*a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::Permute(a, axes) => {
                    let gt = Tensor::from_parts(out_shape.to_vec(), g);
                    acc(*a, kernels::permute(&gt, &inverse_axes(axes))?.into_vec());
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Softmax(a, axis) => {
                    acc(*a, kernels::softmax_backward(node.value.data(), &g, out_shape, *axis));
                }
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    acc(*a, vec![g[0] / T::lit(n.max(1) as f64); n]);
                }
                Op::Gelu(a) => {
                    let xd = val(*a).data();
                    acc(
                        *a,
                        g.iter().zip(xd).map(|(&gv, &x)| gv * kernels::gelu_grad(x)).collect(),
                    );
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    means,
                    rstds,
                } => {
                    let (gx, gg, gb) = layer_norm_backward(val(*x).data(), val(*gamma).data(), means, rstds, &g);
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::Rotate { x, angles, inverse } => {
                    let gt = Tensor::from_parts(out_shape.to_vec(), g);
                    acc(*x, kernels::rotate_pairs(&gt, angles, !*inverse)?.into_vec());
                }
                Op::Resize(x) => {
                    let (oh, ow) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                    acc(*x, kernels::bilinear_resize_backward(val(*x).shape(), &g, oh, ow));
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    ignore_index,
                    counted,
                } => {
                    let lv = val(*logits);
                    let mut gl = vec![T::zero(); lv.numel()];
                    if *counted > 0 {
                        let k = lv.shape()[0];
                        let hw = target.len();
                        let ld = lv.data();
                        let scale = g[0] / T::lit(*counted as f64);
                        for (p, &t) in target.iter().enumerate() {
                            if t == *ignore_index {
                                continue;
                            }
                            let mut mx = T::neg_infinity();
                            for c in 0..k {
                                mx = mx.max(ld[c * hw + p]);
                            }
                            let mut s = T::zero();
                            for c in 0..k {
                                s += (ld[c * hw + p] - mx).exp();
                            }
                            for c in 0..k {
                                let prob = (ld[c * hw + p] - mx).exp() / s;
                                let onehot = if c == t as usize { T::one() } else { T::zero() };
                                gl[c * hw + p] = scale * (prob - onehot);
                            }
                        }
                    }
                    acc(*logits, gl);
                }
                Op::Concat(parts, axis) => {
                    let gt = Tensor::from_parts(out_shape.to_vec(), g);
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).shape()[*axis];
                        acc(*p, kernels::narrow(&gt, *axis, start, len)?.into_vec());
                        start += len;
                    }
                }
                Op::DecayedAttention { q, k, v, d, scale } => {
                    let (gq, gk, gv, gd) = attention::decayed_attention_backward(
                        val(*q),
                        val(*k),
                        val(*v),
                        val(*d),
                        *scale,
                        &g,
                        nodes[d.0].requires_grad,
                    )?;
                    acc(*q, gq);
                    acc(*k, gk);
                    acc(*v, gv);
                    if let Some(gd) = gd {
                        acc(*d, gd);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = val(*x).shape();
                    let (outer, size, inner) = kernels::split_axis(xs, *axis)?;
                    let len = out_shape[*axis];
                    let mut gx = vec![T::zero(); numel(xs)];
                    for o in 0..outer {
                        let dst = o * size * inner + start * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(*x, gx);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn mul_adjoint<T: Element>(g: &[T], out_shape: &[usize], shape: &[usize], other: &Tensor<T>) -> Vec<T> {
    if other.shape() == out_shape && shape == out_shape {
        return g.iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
    }
    let so = kernels::aligned_strides(other.shape(), out_shape);
    let ss = kernels::aligned_strides(shape, out_shape);
    let od = other.data();
    let mut acc = vec![T::zero(); numel(shape)];
    kernels::for_each_broadcast(out_shape, &ss, &so, |i, s, o| acc[s] += g[i] * od[o]);
    acc
}

fn layer_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let cn = T::lit(c as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut gxhat = vec![T::zero(); c];
    for (r, (row, grow)) in x.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..c {
            xhat[j] = (row[j] - mean) * rstd;
            gxhat[j] = grow[j] * gamma[j];
            gg[j] += grow[j] * xhat[j];
            gb[j] += grow[j];
            m1 += gxhat[j];
            m2 += gxhat[j] * xhat[j];
        }
        m1 /= cn;
        m2 /= cn;
        for j in 0..c {
            gx[r * c + j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (gx, gg, gb)
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
