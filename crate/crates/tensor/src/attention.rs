//! Fused decayed attention: `(softmax(q k^T * scale) ⊙ d) v`, evaluated one
//! query row at a time so no `n x m` intermediate is materialized.

use rayon::prelude::*;

use crate::kernels::{aligned_strides, broadcast_shape, for_each_row};
use crate::tensor::numel;
use crate::{Element, Result, Tensor, TensorError};

/// Rows of work (query rows times keys) above which the kernels use rayon.
const PAR_WORK: usize = 1 << 16;

/// Extents of one attention call: `nb` batches of `n` queries over `m` keys,
/// key width `c`, value width `e`.
#[derive(Clone, Debug)]
pub(crate) struct AttnPlan {
    nb: usize,
    n: usize,
    m: usize,
    c: usize,
    e: usize,
    /// Offset of the `n x m` decay block used by each batch.
    d_offsets: Vec<usize>,
    pub(crate) out_shape: Vec<usize>,
}

fn mismatch(lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op: "decayed_attention",
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn plan(q: &[usize], k: &[usize], v: &[usize], d: &[usize]) -> Result<AttnPlan> {
    let rank = q.len();
    if rank < 2 || k.len() != rank || v.len() != rank || d.len() < 2 {
        return Err(TensorError::Invalid(format!(
            "decayed_attention needs q, k, v of equal rank >= 2, got {q:?}, {k:?}, {v:?}"
        )));
    }
    let batch = &q[..rank - 2];
    if &k[..rank - 2] != batch || k[rank - 1] != q[rank - 1] {
        return Err(mismatch(q, k));
    }
    if &v[..rank - 2] != batch || v[rank - 2] != k[rank - 2] {
        return Err(mismatch(k, v));
    }
    let (n, m) = (q[rank - 2], k[rank - 2]);
    let d_batch = &d[..d.len() - 2];
    if d[d.len() - 2..] != [n, m]
        || d_batch.len() > batch.len()
        || broadcast_shape(batch, d_batch).as_deref() != Some(batch)
    {
        return Err(mismatch(q, d));
    }
    let strides = aligned_strides(d_batch, batch);
    let nb = numel(batch);
    let mut d_offsets = Vec::with_capacity(nb);
    if batch.is_empty() {
        d_offsets.push(0);
    } else {
        // walk the batch grid with a unit last axis so each "row" is one batch
        let mut grid = batch.to_vec();
        grid.push(1);
        let mut s = strides.clone();
        s.push(0);
        for_each_row(&grid, &s, &s, |_, o, _| d_offsets.push(o * n * m));
    }
    let mut out_shape = q.to_vec();
    out_shape[rank - 1] = v[rank - 1];
    Ok(AttnPlan {
        nb,
        n,
        m,
        c: q[rank - 1],
        e: v[rank - 1],
        d_offsets,
        out_shape,
    })
}

/// Softmax of `scale * (q_i . k_j)` over `j`, written into `p`.
fn probs_row<T: Element>(qi: &[T], kb: &[T], c: usize, scale: T, p: &mut [T]) {
    let mut mx = T::neg_infinity();
    for (pj, kj) in p.iter_mut().zip(kb.chunks_exact(c)) {
        let mut s = T::zero();
        for (&a, &b) in qi.iter().zip(kj) {
            s += a * b;
        }
        *pj = s * scale;
        mx = mx.max(*pj);
    }
    let mut sum = T::zero();
    for pj in p.iter_mut() {
        *pj = (*pj - mx).exp();
        sum += *pj;
    }
    for pj in p.iter_mut() {
        *pj /= sum;
    }
}

pub fn decayed_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    d: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    let plan = plan(q.shape(), k.shape(), v.shape(), d.shape())?;
    let AttnPlan { n, m, c, e, .. } = plan;
    let (qd, kd, vd, dd) = (q.data(), k.data(), v.data(), d.data());
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    if e == 0 || n == 0 {
        return Ok(Tensor::from_parts(plan.out_shape, out));
    }
    let row = |r: usize, o: &mut [T], p: &mut Vec<T>| {
        let (b, i) = (r / n, r % n);
        p.resize(m, T::zero());
        probs_row(&qd[r * c..(r + 1) * c], &kd[b * m * c..(b + 1) * m * c], c, scale, p);
        let di = &dd[plan.d_offsets[b] + i * m..plan.d_offsets[b] + (i + 1) * m];
        let vb = &vd[b * m * e..(b + 1) * m * e];
        for ((&pj, &dj), vj) in p.iter().zip(di).zip(vb.chunks_exact(e)) {
            let a = pj * dj;
            for (ov, &x) in o.iter_mut().zip(vj) {
                *ov += a * x;
            }
        }
    };
    if plan.nb * n * m < PAR_WORK {
        let mut p = Vec::new();
        for (r, o) in out.chunks_exact_mut(e).enumerate() {
            row(r, o, &mut p);
        }
    } else {
        out.par_chunks_exact_mut(e)
            .enumerate()
            .for_each_init(Vec::new, |p, (r, o)| row(r, o, p));
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

/// Adjoints of `q`, `k`, `v` and, when requested, of the decay.
pub type AttentionGrads<T> = (Vec<T>, Vec<T>, Vec<T>, Option<Vec<T>>);

/// Adjoints `(gq, gk, gv, gd)` given the upstream gradient `g`. The
/// probabilities are recomputed row by row; `gd` is summed over broadcast
/// batches and only formed when `want_d` is set.
pub fn decayed_attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    d: &Tensor<T>,
    scale: T,
    g: &[T],
    want_d: bool,
) -> Result<AttentionGrads<T>> {
    let plan = plan(q.shape(), k.shape(), v.shape(), d.shape())?;
    let AttnPlan { nb, n, m, c, e, .. } = plan;
    let (qd, kd, vd, dd) = (q.data(), k.data(), v.data(), d.data());
    let mut gq = vec![T::zero(); nb * n * c];
    let mut gk = vec![T::zero(); nb * m * c];
    let mut gv = vec![T::zero(); nb * m * e];
    let mut gd = want_d.then(|| vec![T::zero(); d.numel()]);

    // one batch; `gd_rows` receives gA_ij * p_ij for each row when present
    let batch = |b: usize, gq: &mut [T], gk: &mut [T], gv: &mut [T], mut gd_rows: Option<&mut [T]>| {
        let kb = &kd[b * m * c..(b + 1) * m * c];
        let vb = &vd[b * m * e..(b + 1) * m * e];
        let mut p = vec![T::zero(); m];
        let mut gs = vec![T::zero(); m];
        for i in 0..n {
            let r = b * n + i;
            let qi = &qd[r * c..(r + 1) * c];
            let gi = &g[r * e..(r + 1) * e];
            probs_row(qi, kb, c, scale, &mut p);
            let di = &dd[plan.d_offsets[b] + i * m..plan.d_offsets[b] + (i + 1) * m];
            let mut dot = T::zero();
            for j in 0..m {
                let vj = &vb[j * e..(j + 1) * e];
                let mut ga = T::zero();
                for (&x, &y) in gi.iter().zip(vj) {
                    ga += x * y;
                }
                let a = p[j] * di[j];
                for (gvv, &x) in gv[j * e..(j + 1) * e].iter_mut().zip(gi) {
                    *gvv += a * x;
                }
                if let Some(rows) = gd_rows.as_deref_mut() {
                    rows[i * m + j] += ga * p[j];
                }
                gs[j] = ga * di[j];
                dot += p[j] * gs[j];
            }
            let gqi = &mut gq[i * c..(i + 1) * c];
            for j in 0..m {
                let s = p[j] * (gs[j] - dot) * scale;
                let kj = &kb[j * c..(j + 1) * c];
                for (x, &y) in gqi.iter_mut().zip(kj) {
                    *x += s * y;
                }
                for (x, &y) in gk[j * c..(j + 1) * c].iter_mut().zip(qi) {
                    *x += s * y;
                }
            }
        }
    };

    if let Some(gd) = gd.as_mut() {
        let mut rows = vec![T::zero(); n * m];
        for b in 0..nb {
            rows.iter_mut().for_each(|x| *x = T::zero());
            batch(
                b,
                &mut gq[b * n * c..(b + 1) * n * c],
                &mut gk[b * m * c..(b + 1) * m * c],
                &mut gv[b * m * e..(b + 1) * m * e],
                Some(&mut rows),
            );
            let off = plan.d_offsets[b];
            for (x, &y) in gd[off..off + n * m].iter_mut().zip(&rows) {
                *x += y;
            }
        }
    } else if nb > 1 && nb * n * m >= PAR_WORK && c > 0 && e > 0 {
        gq.par_chunks_exact_mut(n * c)
            .zip(gk.par_chunks_exact_mut(m * c))
            .zip(gv.par_chunks_exact_mut(m * e))
            .enumerate()
            .for_each(|(b, ((gq, gk), gv))| batch(b, gq, gk, gv, None));
    } else {
        for b in 0..nb {
            batch(
                b,
                &mut gq[b * n * c..(b + 1) * n * c],
                &mut gk[b * m * c..(b + 1) * m * c],
                &mut gv[b * m * e..(b + 1) * m * e],
                None,
            );
        }
    }
    Ok((gq, gk, gv, gd))
}
