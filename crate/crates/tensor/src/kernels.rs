//! Tape-free numeric kernels. The tape calls these for forward values and
//! adjoints; inference paths call them directly.

use rayon::prelude::*;

use crate::tensor::{contiguous_strides, numel};
use crate::{Element, Result, Tensor, TensorError};

/// Work (multiply-adds) above which matmul fans out across the rayon pool.
const PAR_WORK: usize = 1 << 18;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed right-aligned inside `out`; broadcast axes get 0.
pub fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < lead || shape[d - lead] == 1 {
                0
            } else {
                base[d - lead]
            }
        })
        .collect()
}

/// Walks the rows (last-axis runs) of `out_shape` in row-major order,
/// reporting the flat output offset of each row and the matching offsets
/// under strides `sa` and `sb`.
pub fn for_each_row(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let inner = out_shape[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for base in (0..total).step_by(inner) {
        f(base, oa, ob);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Walks every element of `out_shape` in row-major order, reporting the flat
/// output index and the matching offsets under strides `sa` and `sb`.
pub fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let Some(&inner) = out_shape.last() else {
        f(0, 0, 0);
        return;
    };
    let (ia, ib) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    for_each_row(out_shape, sa, sb, |base, oa, ob| {
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
    });
}

pub fn binary<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = aligned_strides(a.shape(), &out_shape);
    let sb = aligned_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); numel(&out_shape)];
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    for_each_row(&out_shape, &sa, &sb, |base, oa, ob| {
        let dst = &mut out[base..base + inner];
        match (ia, ib) {
            (1, 1) => {
                for ((o, &x), &y) in dst.iter_mut().zip(&ad[oa..oa + inner]).zip(&bd[ob..ob + inner]) {
                    *o = f(x, y);
                }
            }
            (1, 0) => {
                let y = bd[ob];
                for (o, &x) in dst.iter_mut().zip(&ad[oa..oa + inner]) {
                    *o = f(x, y);
                }
            }
            (0, 1) => {
                let x = ad[oa];
                for (o, &y) in dst.iter_mut().zip(&bd[ob..ob + inner]) {
                    *o = f(x, y);
                }
            }
            _ => {
                for (j, o) in dst.iter_mut().enumerate() {
                    *o = f(ad[oa + j * ia], bd[ob + j * ib]);
                }
            }
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Sums `g` (shaped like the broadcast output) down onto `shape`.
pub fn reduce_to_shape<T: Element>(g: &[T], out_shape: &[usize], shape: &[usize]) -> Vec<T> {
    if out_shape == shape {
        return g.to_vec();
    }
    let s = aligned_strides(shape, out_shape);
    let zero = vec![0; out_shape.len()];
    let mut acc = vec![T::zero(); numel(shape)];
    for_each_broadcast(out_shape, &s, &zero, |i, o, _| acc[o] += g[i]);
    acc
}

/// Copies `x` into the axis order `axes` (output axis i is input axis `axes[i]`).
pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Invalid(format!(
            "permute: {axes:?} is not a permutation of 0..{rank}"
        )));
    }
    let in_strides = contiguous_strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; rank];
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    if rank == 0 {
        out.copy_from_slice(xd);
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let inner = out_shape[rank - 1];
    let step = src[rank - 1];
    for_each_row(&out_shape, &src, &zero, |base, o, _| {
        let dst = &mut out[base..base + inner];
        if step == 1 {
            dst.copy_from_slice(&xd[o..o + inner]);
        } else {
            for (j, v) in dst.iter_mut().enumerate() {
                *v = xd[o + j * step];
            }
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[inline]
fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    // c: rows x n, a: rows x k, b: k x n
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// ga (m x k) += g (m x n) * b^T, with b stored k x n.
#[inline]
fn gemm_nt<T: Element>(g: &[T], b: &[T], ga: &mut [T], k: usize, n: usize) {
    for (garow, grow) in ga.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (p, gv) in garow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            *gv += s;
        }
    }
}

/// gb (k x n) += a^T * g, with a stored m x k and g m x n.
#[inline]
fn gemm_tn<T: Element>(a: &[T], g: &[T], gb: &mut [T], k: usize, n: usize) {
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (p, &av) in arow.iter().enumerate() {
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Batch layout shared by matmul forward and backward.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a batch index, b batch index) per output batch.
    pub pairs: Vec<(usize, usize)>,
    pub a_batches: usize,
    pub b_batches: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
    let sa = aligned_strides(ba, &batch);
    let sb = aligned_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(numel(&batch));
    for_each_broadcast(&batch, &sa, &sb, |_, x, y| pairs.push((x, y)));
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
        a_batches: numel(ba),
        b_batches: numel(bb),
    })
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let MatmulPlan { m, k, n, .. } = plan;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    if m * n == 0 {
        return Ok(Tensor::from_parts(plan.out_shape, out));
    }
    let work = plan.pairs.len() * m * k * n;
    let run = |(ia, ib): (usize, usize), c: &mut [T]| {
        gemm_nn(
            &ad[ia * m * k..(ia + 1) * m * k],
            &bd[ib * k * n..(ib + 1) * k * n],
            c,
            k,
            n,
        );
    };
    if work < PAR_WORK {
        for (c, &pair) in out.chunks_exact_mut(m * n).zip(&plan.pairs) {
            run(pair, c);
        }
    } else if plan.pairs.len() > 1 {
        out.par_chunks_exact_mut(m * n)
            .zip(plan.pairs.par_iter())
            .for_each(|(c, &pair)| run(pair, c));
    } else {
        let rows = (m / rayon::current_num_threads().max(1)).max(1);
        let bmat = &bd[..k * n];
        out.par_chunks_mut(rows * n).enumerate().for_each(|(chunk, c)| {
            let r0 = chunk * rows;
            let nr = c.len() / n;
            gemm_nn(&ad[r0 * k..(r0 + nr) * k], bmat, c, k, n);
        });
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

/// Optional adjoints of the two operands of a binary kernel.
pub type PairGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

/// Adjoints of `a @ b` given upstream gradient `g`.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    want_a: bool,
    want_b: bool,
) -> Result<PairGrads<T>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let MatmulPlan { m, k, n, .. } = plan;
    let (ad, bd) = (a.data(), b.data());
    let parallel = plan.pairs.len() * m * k * n >= PAR_WORK;

    let ga = want_a.then(|| {
        let mut ga = vec![T::zero(); a.numel()];
        if m * k > 0 {
            if parallel && plan.a_batches == plan.pairs.len() && plan.pairs.len() > 1 {
                ga.par_chunks_exact_mut(m * k)
                    .zip(plan.pairs.par_iter().enumerate())
                    .for_each(|(dst, (o, &(_, ib)))| {
                        gemm_nt(
                            &g[o * m * n..(o + 1) * m * n],
                            &bd[ib * k * n..(ib + 1) * k * n],
                            dst,
                            k,
                            n,
                        )
                    });
            } else {
                for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm_nt(
                        &g[o * m * n..(o + 1) * m * n],
                        &bd[ib * k * n..(ib + 1) * k * n],
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                        k,
                        n,
                    );
                }
            }
        }
        ga
    });
    let gb = want_b.then(|| {
        let mut gb = vec![T::zero(); b.numel()];
        if k * n > 0 {
            if parallel && plan.b_batches == plan.pairs.len() && plan.pairs.len() > 1 {
                gb.par_chunks_exact_mut(k * n)
                    .zip(plan.pairs.par_iter().enumerate())
                    .for_each(|(dst, (o, &(ia, _)))| {
                        gemm_tn(
                            &ad[ia * m * k..(ia + 1) * m * k],
                            &g[o * m * n..(o + 1) * m * n],
                            dst,
                            k,
                            n,
                        )
                    });
            } else {
                for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm_tn(
                        &ad[ia * m * k..(ia + 1) * m * k],
                        &g[o * m * n..(o + 1) * m * n],
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                        k,
                        n,
                    );
                }
            }
        }
        gb
    });
    Ok((ga, gb))
}

/// (outer, len, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let xd = x.data();
    if inner == 1 && len > 0 {
        let mut out = xd.to_vec();
        for row in out.chunks_exact_mut(len) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        return Ok(Tensor::from_parts(x.shape().to_vec(), out));
    }
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(xd[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (xd[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis).expect("validated in forward");
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += y[base + j * inner] * g[base + j * inner];
            }
            for j in 0..len {
                let p = base + j * inner;
                gx[p] = y[p] * (g[p] - dot);
            }
        }
    }
    gx
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Lerp<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Half-pixel-center source coordinates (align_corners = false).
pub(crate) fn lerp_table<T: Element>(input: usize, output: usize) -> Vec<Lerp<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Lerp {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

fn resize_dims(shape: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::Invalid(format!(
            "bilinear_resize: target size {out_h}x{out_w} must be at least 1x1"
        )));
    }
    if shape.len() < 2 || shape[shape.len() - 1] == 0 || shape[shape.len() - 2] == 0 {
        return Err(TensorError::Invalid(format!(
            "bilinear_resize: expected [.., h, w] with h, w >= 1, got {shape:?}"
        )));
    }
    let r = shape.len();
    Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
}

/// Bilinear resize of the trailing two axes.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = resize_dims(x.shape(), out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ys = lerp_table::<T>(h, out_h);
    let xs = lerp_table::<T>(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for ly in &ys {
            let r0 = &plane[ly.lo * w..(ly.lo + 1) * w];
            let r1 = &plane[ly.hi * w..(ly.hi + 1) * w];
            for lx in &xs {
                // lerp form keeps constant inputs exactly constant
                let top = r0[lx.lo] + lx.frac * (r0[lx.hi] - r0[lx.lo]);
                let bot = r1[lx.lo] + lx.frac * (r1[lx.hi] - r1[lx.lo]);
                out.push(top + ly.frac * (bot - top));
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn bilinear_resize_backward<T: Element>(in_shape: &[usize], g: &[T], out_h: usize, out_w: usize) -> Vec<T> {
    let (planes, h, w) = resize_dims(in_shape, out_h, out_w).expect("validated in forward");
    if (h, w) == (out_h, out_w) {
        return g.to_vec();
    }
    let ys = lerp_table::<T>(h, out_h);
    let xs = lerp_table::<T>(w, out_w);
    let mut gx = vec![T::zero(); planes * h * w];
    let one = T::one();
    for p in 0..planes {
        let plane = &mut gx[p * h * w..(p + 1) * h * w];
        let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ly) in ys.iter().enumerate() {
            for (ox, lx) in xs.iter().enumerate() {
                let v = gp[oy * out_w + ox];
                let (wy0, wy1) = (one - ly.frac, ly.frac);
                let (wx0, wx1) = (one - lx.frac, lx.frac);
                plane[ly.lo * w + lx.lo] += v * wy0 * wx0;
                plane[ly.lo * w + lx.hi] += v * wy0 * wx1;
                plane[ly.hi * w + lx.lo] += v * wy1 * wx0;
                plane[ly.hi * w + lx.hi] += v * wy1 * wx1;
            }
        }
    }
    gx
}

const GELU_K: f64 = 0.044_715;

pub fn gelu<T: Element>(v: T) -> T {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * v * (T::one() + (s * (v + T::lit(GELU_K) * v * v * v)).tanh())
}

pub(crate) fn gelu_grad<T: Element>(v: T) -> T {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let t = (s * (v + T::lit(GELU_K) * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * s * (T::one() + T::lit(3.0 * GELU_K) * v * v)
}

/// Normalizes over the last axis; returns output plus per-row mean and 1/std.
pub(crate) fn layer_norm<T: Element>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = x.len() / c;
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let cn = T::lit(c as f64);
    for (r, row) in x.chunks_exact(c).enumerate() {
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Rotates channel pairs (2j, 2j+1) of a [.., N, d] tensor by `angles[n, j]`.
pub fn rotate_pairs<T: Element>(x: &Tensor<T>, angles: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (n, d) = rotation_dims(x.shape(), angles.shape())?;
    let pairs = d / 2;
    let trig: Vec<(T, T)> = angles
        .data()
        .iter()
        .map(|&a| {
            let a = if inverse { -a } else { a };
            (a.cos(), a.sin())
        })
        .collect();
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for (r, (src, dst)) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let pos = r % n;
        for j in 0..pairs {
            let (c, s) = trig[pos * pairs + j];
            let (u, v) = (src[2 * j], src[2 * j + 1]);
            dst[2 * j] = u * c - v * s;
            dst[2 * j + 1] = u * s + v * c;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn rotation_dims(x: &[usize], angles: &[usize]) -> Result<(usize, usize)> {
    if x.len() < 2 {
        return Err(TensorError::Invalid(format!("rotation expects [.., N, d], got {x:?}")));
    }
    let (n, d) = (x[x.len() - 2], x[x.len() - 1]);
    if d % 2 != 0 {
        return Err(TensorError::Invalid(format!(
            "rotation needs an even channel count, got d={d}"
        )));
    }
    if angles != [n, d / 2] {
        return Err(TensorError::ShapeMismatch {
            op: "rotate_pairs",
            lhs: x.to_vec(),
            rhs: angles.to_vec(),
        });
    }
    Ok((n, d))
}

pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { axis, rank });
    }
    for p in parts {
        let same = p.rank() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !same {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let blk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, size, inner) = split_axis(x.shape(), axis)?;
    if start + len > size {
        return Err(TensorError::Invalid(format!(
            "narrow: range {start}..{} exceeds axis {axis} of size {size}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * size * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Reverses the last axis.
pub fn flip_last<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(w.max(1)) {
        out.extend(row.iter().rev());
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
