//! Parallel, recurrent, chunkwise and bidirectional retention.

use segkit_tensor::{Element, Tape, Tensor, Var};

use super::decay::{build_causal_decay, stack, DecayMask};
use super::rotation::angles_1d;
use super::{check_tokens, merge_heads, per_head, split_heads, Projections, RetentionConfig};
use crate::error::{Result, SegError};

/// Rotated `Q`, `K` and plain `V`, each `[heads, n, d_k]`.
pub(crate) fn rotated_qkv<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
    angles: &Tensor<T>,
) -> Result<(Var, Var, Var)> {
    let q = split_heads(tape, x, proj.w_q, cfg)?;
    let k = split_heads(tape, x, proj.w_k, cfg)?;
    let v = split_heads(tape, x, proj.w_v, cfg)?;
    let q = tape.rotate_pairs(q, angles, false)?;
    let k = tape.rotate_pairs(k, angles, false)?;
    Ok((q, k, v))
}

fn check_masks(masks: &[DecayMask], cfg: &RetentionConfig, n: usize) -> Result<()> {
    if masks.len() != cfg.heads {
        return Err(SegError::Config(format!(
            "expected one decay mask per head ({}), got {}",
            cfg.heads,
            masks.len()
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.size() != n) {
        return Err(SegError::Config(format!(
            "decay mask of size {} does not match sequence length {n}",
            m.size()
        )));
    }
    Ok(())
}

/// `(Q K^T ⊙ D) V` per head with an explicit `[n, d_k/2]` angle table.
pub fn retention_with_angles<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
    masks: &[DecayMask],
    angles: &Tensor<T>,
) -> Result<Var> {
    let n = check_tokens(tape, x, cfg)?;
    check_masks(masks, cfg, n)?;
    let (q, k, v) = rotated_qkv(tape, x, cfg, proj, angles)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let d = tape.constant(stack::<T>(masks));
    let weighted = tape.mul(scores, d)?;
    let o = tape.matmul(weighted, v)?;
    merge_heads(tape, o)
}

/// Parallel form with one mask per head (causal masks give causal retention).
pub fn retention_parallel<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
    masks: &[DecayMask],
) -> Result<Var> {
    let n = check_tokens(tape, x, cfg)?;
    retention_with_angles(tape, x, cfg, proj, masks, &angles_1d(n, &cfg.theta))
}

/// Parallel form with `gamma^|n-m|` masks.
pub fn bi_retention<T: Element>(tape: &Tape<T>, x: Var, cfg: &RetentionConfig, proj: &Projections) -> Result<Var> {
    let n = check_tokens(tape, x, cfg)?;
    retention_parallel(tape, x, cfg, proj, &cfg.bidirectional_masks(n)?)
}

/// Per-head `[heads, d_k, d_k]` state of the recurrent form.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentState {
    /// `S_n = sum_{m<=n} gamma^(n-m) K_m^T V_m`.
    pub s: Var,
    /// Number of tokens absorbed.
    pub n: usize,
    gamma: Var,
}

impl RecurrentState {
    pub fn new<T: Element>(tape: &Tape<T>, cfg: &RetentionConfig) -> Self {
        Self {
            s: tape.constant(Tensor::zeros(&[cfg.heads, cfg.d_k, cfg.d_k])),
            n: 0,
            gamma: per_head(tape, cfg, |g| g),
        }
    }

    /// Absorbs one token (`q`, `k`, `v` each `[heads, 1, d_k]`, already rotated)
    /// and returns `o_n = Q_n S_n`.
    pub fn step<T: Element>(&mut self, tape: &Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let kt = tape.transpose(k)?;
        let kv = tape.matmul(kt, v)?;
        let decayed = tape.mul(self.s, self.gamma)?;
        self.s = tape.add(decayed, kv)?;
        self.n += 1;
        Ok(tape.matmul(q, self.s)?)
    }
}

/// Token-by-token recurrence; also returns the final state.
pub fn retention_recurrent_with_state<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
) -> Result<(Var, RecurrentState)> {
    let n = check_tokens(tape, x, cfg)?;
    let (q, k, v) = rotated_qkv(tape, x, cfg, proj, &angles_1d(n, &cfg.theta))?;
    let mut state = RecurrentState::new(tape, cfg);
    let mut outs = Vec::with_capacity(n);
    for t in 0..n {
        let qt = tape.narrow(q, 1, t, 1)?;
        let kt = tape.narrow(k, 1, t, 1)?;
        let vt = tape.narrow(v, 1, t, 1)?;
        outs.push(state.step(tape, qt, kt, vt)?);
    }
    let o = tape.concat(&outs, 1)?;
    Ok((merge_heads(tape, o)?, state))
}

pub fn retention_recurrent<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
) -> Result<Var> {
    Ok(retention_recurrent_with_state(tape, x, cfg, proj)?.0)
}

/// `[heads, b, 1]` constant with `f(gamma_h, j)` at row `j`.
fn per_head_rows<T: Element>(tape: &Tape<T>, cfg: &RetentionConfig, b: usize, f: impl Fn(f64, usize) -> f64) -> Var {
    let data: Vec<T> = cfg
        .gammas
        .iter()
        .flat_map(|&g| (0..b).map(move |j| (g, j)))
        .map(|(g, j)| T::lit(f(g, j)))
        .collect();
    tape.constant(Tensor::from_vec_unchecked(&[cfg.heads, b, 1], data).expect("heads*b entries"))
}

/// Parallel retention inside chunks of `chunk` tokens, with the state carried
/// across chunk boundaries. `chunk >= n` is a single parallel chunk.
pub fn retention_chunkwise<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
    chunk: usize,
) -> Result<Var> {
    if chunk == 0 {
        return Err(SegError::Config("chunk size must be at least 1".into()));
    }
    let n = check_tokens(tape, x, cfg)?;
    let (q, k, v) = rotated_qkv(tape, x, cfg, proj, &angles_1d(n, &cfg.theta))?;
    let mut s: Option<Var> = None;
    let mut outs = Vec::new();
    let mut start = 0;
    while start < n {
        let b = chunk.min(n - start);
        let qc = tape.narrow(q, 1, start, b)?;
        let kc = tape.narrow(k, 1, start, b)?;
        let vc = tape.narrow(v, 1, start, b)?;
        let masks: Vec<DecayMask> = cfg
            .gammas
            .iter()
            .map(|&g| build_causal_decay(g, b))
            .collect::<Result<_>>()?;
        let kt = tape.transpose(kc)?;
        let scores = tape.matmul(qc, kt)?;
        let d = tape.constant(stack::<T>(&masks));
        let weighted = tape.mul(scores, d)?;
        let mut out = tape.matmul(weighted, vc)?;
        // query j of the chunk sees the carried state decayed by gamma^(j+1)
        if let Some(prev) = s {
            let xi = per_head_rows(tape, cfg, b, |g, j| g.powi(j as i32 + 1));
            let qx = tape.mul(qc, xi)?;
            let cross = tape.matmul(qx, prev)?;
            out = tape.add(out, cross)?;
        }
        // S' = gamma^b S + (K ⊙ zeta)^T V, zeta_j = gamma^(b-1-j)
        let zeta = per_head_rows(tape, cfg, b, |g, j| g.powi((b - 1 - j) as i32));
        let kz = tape.mul(kc, zeta)?;
        let kzt = tape.transpose(kz)?;
        let inner = tape.matmul(kzt, vc)?;
        s = Some(match s {
            Some(prev) => {
                let gb = per_head(tape, cfg, |g| g.powi(b as i32));
                let decayed = tape.mul(prev, gb)?;
                tape.add(decayed, inner)?
            }
            None => inner,
        });
        outs.push(out);
        start += b;
    }
    let o = tape.concat(&outs, 1)?;
    merge_heads(tape, o)
}
