//! Decayed softmax attention over an image grid: the full Manhattan form and
//! the axis-by-axis decomposition.

use segkit_tensor::{Element, Tape, Tensor, Var};

use super::decay::{build_2d_decay, build_axial_decays, stack, DecayMask};
use super::paradigms::rotated_qkv;
use super::rotation::angles_2d;
use super::{check_tokens, merge_heads, Projections, RetentionConfig};
use crate::error::{Result, SegError};

fn check_grid<T: Element>(tape: &Tape<T>, x: Var, cfg: &RetentionConfig, h: usize, w: usize) -> Result<()> {
    let n = check_tokens(tape, x, cfg)?;
    if h == 0 || w == 0 || n != h * w {
        return Err(SegError::Config(format!(
            "token count {n} does not match a {h}x{w} grid"
        )));
    }
    Ok(())
}

/// `softmax(Q K^T * scale) ⊙ D`, then `@ V`, over the last two axes.
fn decayed_attention<T: Element>(tape: &Tape<T>, q: Var, k: Var, v: Var, d: Var, cfg: &RetentionConfig) -> Result<Var> {
    let scale = if cfg.softmax_scale {
        T::lit(1.0 / (cfg.d_k as f64).sqrt())
    } else {
        T::one()
    };
    Ok(tape.decayed_attention(q, k, v, d, scale)?)
}

/// Per-head Manhattan masks stacked as `[heads, h*w, h*w]`.
pub fn full_decay_tensor<T: Element>(cfg: &RetentionConfig, h: usize, w: usize) -> Result<Tensor<T>> {
    let masks: Vec<DecayMask> = cfg
        .gammas
        .iter()
        .map(|&g| build_2d_decay(g, h, w))
        .collect::<Result<_>>()?;
    Ok(stack::<T>(&masks))
}

/// Per-head axial masks `(D^H, D^W)` shaped `[heads, 1, h, h]` and `[heads, 1, w, w]`.
pub fn axial_decay_tensors<T: Element>(cfg: &RetentionConfig, h: usize, w: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let heads = cfg.heads;
    let (mut dh, mut dw) = (Vec::with_capacity(heads), Vec::with_capacity(heads));
    for &g in &cfg.gammas {
        let (a, b) = build_axial_decays(g, h, w)?;
        dh.push(a);
        dw.push(b);
    }
    Ok((
        stack::<T>(&dh).reshape(&[heads, 1, h, h])?,
        stack::<T>(&dw).reshape(&[heads, 1, w, w])?,
    ))
}

/// Full attention core on rotated `[heads, h*w, dk]` queries, keys and values
/// with `d` from [`full_decay_tensor`]. Returns `[heads, h*w, dk]`.
pub fn masa_core<T: Element>(tape: &Tape<T>, (q, k, v): (Var, Var, Var), d: Var, cfg: &RetentionConfig) -> Result<Var> {
    decayed_attention(tape, q, k, v, d, cfg)
}

/// Decomposed attention core: row attention with `D^W`, then column attention
/// with `D^H`. Inputs and output are `[heads, h*w, dk]`.
#[allow(clippy::too_many_arguments)]
pub fn resa_core<T: Element>(
    tape: &Tape<T>,
    (q, k, v): (Var, Var, Var),
    (dh, dw): (Var, Var),
    cfg: &RetentionConfig,
    h: usize,
    w: usize,
) -> Result<Var> {
    let (heads, dk) = (cfg.heads, cfg.d_k);
    // [heads, h*w, dk] -> [heads, h, w, dk]: each of the h rows attends along w
    let grid = [heads, h, w, dk];
    let (q, k, v) = (
        tape.reshape(q, &grid)?,
        tape.reshape(k, &grid)?,
        tape.reshape(v, &grid)?,
    );
    let rows = decayed_attention(tape, q, k, v, dw, cfg)?;

    // swap spatial axes -> [heads, w, h, dk]: each of the w columns attends along h
    let swap = [0, 2, 1, 3];
    let (qc, kc, vc) = (
        tape.permute(q, &swap)?,
        tape.permute(k, &swap)?,
        tape.permute(rows, &swap)?,
    );
    let cols = decayed_attention(tape, qc, kc, vc, dh, cfg)?;

    // back to [heads, h, w, dk] and row-major tokens
    let o = tape.permute(cols, &swap)?;
    Ok(tape.reshape(o, &[heads, h * w, dk])?)
}

/// Full attention over all `h*w` tokens with the Manhattan decay.
/// `x` is `[h*w, d_model]`, row-major.
pub fn masa_full<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
    h: usize,
    w: usize,
) -> Result<Var> {
    check_grid(tape, x, cfg, h, w)?;
    let qkv = rotated_qkv(tape, x, cfg, proj, &angles_2d(h, w, &cfg.theta))?;
    let d = tape.constant(full_decay_tensor(cfg, h, w)?);
    let o = masa_core(tape, qkv, d, cfg)?;
    merge_heads(tape, o)
}

/// Row attention with `D^W`, then column attention with `D^H`.
pub fn resa_decomposed<T: Element>(
    tape: &Tape<T>,
    x: Var,
    cfg: &RetentionConfig,
    proj: &Projections,
    h: usize,
    w: usize,
) -> Result<Var> {
    check_grid(tape, x, cfg, h, w)?;
    let qkv = rotated_qkv(tape, x, cfg, proj, &angles_2d(h, w, &cfg.theta))?;
    let (dh, dw) = axial_decay_tensors(cfg, h, w)?;
    let o = resa_core(tape, qkv, (tape.constant(dh), tape.constant(dw)), cfg, h, w)?;
    merge_heads(tape, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retention::RetentionParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use segkit_tensor::{kernels, Tensor};

    fn params(heads: usize, d_k: usize, d_model: usize, seed: u64) -> RetentionParams<f64> {
        let cfg = RetentionConfig::new(heads, d_k).unwrap().with_gamma(0.8).unwrap();
        RetentionParams::random(cfg, d_model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_x(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_pixel_returns_value_row() {
        let p = params(2, 4, 6, 1);
        let x = random_x(1, 6, 2);
        let v = kernels::matmul(&x, &p.w_v).unwrap();
        assert!(p.masa_full(&x, 1, 1).unwrap().max_abs_diff(&v) < 1e-15);
        assert!(p.resa_decomposed(&x, 1, 1).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn strips_match_full() {
        let p = params(2, 4, 8, 3);
        for (h, w) in [(1, 7), (6, 1)] {
            let x = random_x(h * w, 8, 4);
            let full = p.masa_full(&x, h, w).unwrap();
            let dec = p.resa_decomposed(&x, h, w).unwrap();
            assert!(full.max_abs_diff(&dec) < 1e-10, "{h}x{w}");
        }
    }

    #[test]
    fn identical_tokens_give_shared_value() {
        let p = params(1, 4, 4, 5);
        let row = [0.3, -0.2, 0.9, 0.1];
        let x = Tensor::from_fn(&[6, 4], |i| row[i % 4]);
        let v = kernels::matmul(&Tensor::new(&[1, 4], row.to_vec()).unwrap(), &p.w_v).unwrap();
        let cfg = p.config.clone().without_rotation().with_gamma(1.0).unwrap();
        let p = RetentionParams::new(cfg, p.w_q, p.w_k, p.w_v).unwrap();
        for out in [p.masa_full(&x, 2, 3).unwrap(), p.resa_decomposed(&x, 2, 3).unwrap()] {
            for r in out.data().chunks(4) {
                for (a, b) in r.iter().zip(v.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let p = params(1, 4, 4, 1);
        let x = random_x(5, 4, 1);
        assert!(p.masa_full(&x, 2, 3).is_err());
        assert!(p.resa_decomposed(&x, 2, 3).is_err());
    }
}
