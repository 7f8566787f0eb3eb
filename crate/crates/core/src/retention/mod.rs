//! Retention and decayed attention.
//!
//! Queries and keys are rotated channel-pairwise by their position before
//! any product is formed, so `Q_n . K_m` depends on `n - m` only. Both are
//! rotated in the same direction: for the real realization the conjugate on
//! the key and the transpose in `Q K^T` together amount to a plain dot
//! product of the two rotated vectors.
//!
//! Three causal paradigms compute the same result:
//! * parallel: `(Q K^T ⊙ D) V` with the causal decay `D`,
//! * recurrent: `S_n = gamma S_{n-1} + K_n^T V_n`, `o_n = Q_n S_n`,
//! * chunkwise: parallel inside fixed-size chunks, recurrent across them.
//!
//! The 2D operators apply `softmax(Q K^T / sqrt(d_k)) ⊙ D` (full Manhattan
//! mask, or one axis at a time for the decomposed form). Retention itself
//! applies no softmax.

mod decay;
mod paradigms;
mod rotation;
mod spatial;

use rand::Rng;
use segkit_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use paradigms::rotated_qkv;

pub use decay::{
    build_2d_decay, build_axial_decays, build_bidirectional_decay, build_causal_decay, DecayKind, DecayMask,
};
pub use paradigms::{
    bi_retention, retention_chunkwise, retention_parallel, retention_recurrent, retention_recurrent_with_state,
    retention_with_angles, RecurrentState,
};
pub use rotation::{angles_1d, angles_2d, apply_rotation, default_theta};
pub use spatial::{axial_decay_tensors, full_decay_tensor, masa_core, masa_full, resa_core, resa_decomposed};

/// Head layout, decay rates and rotation angles shared by every retention operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionConfig {
    pub heads: usize,
    pub d_k: usize,
    /// One decay rate per head, each in `(0, 1]`.
    pub gammas: Vec<f64>,
    /// One angle per channel pair (`d_k / 2` values).
    pub theta: Vec<f64>,
    /// Divide attention scores by `sqrt(d_k)` before the softmax in the 2D operators.
    pub softmax_scale: bool,
}

/// `gamma_h = 1 - 2^(-offset - h)`; offset 5 gives the usual language-model rates.
pub fn default_gammas(heads: usize, offset: f64) -> Vec<f64> {
    (0..heads).map(|h| 1.0 - 2f64.powf(-offset - h as f64)).collect()
}

impl RetentionConfig {
    pub fn new(heads: usize, d_k: usize) -> Result<Self> {
        let cfg = Self {
            heads,
            d_k,
            gammas: default_gammas(heads, 5.0),
            theta: default_theta(d_k),
            softmax_scale: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_gammas(mut self, gammas: Vec<f64>) -> Result<Self> {
        self.gammas = gammas;
        self.validate()?;
        Ok(self)
    }

    /// Same decay for every head.
    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        let heads = self.heads;
        self.with_gammas(vec![gamma; heads])
    }

    /// Zero angles: rotation becomes the identity.
    pub fn without_rotation(mut self) -> Self {
        self.theta = vec![0.0; self.d_k / 2];
        self
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(SegError::Config("retention needs at least one head".into()));
        }
        if self.d_k == 0 || !self.d_k.is_multiple_of(2) {
            return Err(SegError::Config(format!(
                "head dimension must be even and positive, got {}",
                self.d_k
            )));
        }
        if self.theta.len() != self.d_k / 2 {
            return Err(SegError::Config(format!(
                "expected {} rotation angles, got {}",
                self.d_k / 2,
                self.theta.len()
            )));
        }
        if self.gammas.len() != self.heads {
            return Err(SegError::Config(format!(
                "expected {} decay rates, got {}",
                self.heads,
                self.gammas.len()
            )));
        }
        if let Some(g) = self.gammas.iter().find(|&&g| !(g > 0.0 && g <= 1.0)) {
            return Err(SegError::Config(format!("decay gamma must lie in (0, 1], got {g}")));
        }
        Ok(())
    }

    pub fn causal_masks(&self, n: usize) -> Result<Vec<DecayMask>> {
        self.gammas.iter().map(|&g| build_causal_decay(g, n)).collect()
    }

    pub fn bidirectional_masks(&self, n: usize) -> Result<Vec<DecayMask>> {
        self.gammas.iter().map(|&g| build_bidirectional_decay(g, n)).collect()
    }
}

/// Projection weights `[d_model, heads * d_k]` plus the head configuration.
#[derive(Clone, Debug)]
pub struct RetentionParams<T> {
    pub config: RetentionConfig,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

/// Projection weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl<T: Element> RetentionParams<T> {
    pub fn new(config: RetentionConfig, w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>) -> Result<Self> {
        config.validate()?;
        let inner = config.inner_dim();
        let d_model = w_q.shape().first().copied().unwrap_or(0);
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != [d_model, inner] {
                return Err(SegError::Config(format!(
                    "{name} has shape {:?}, expected [{d_model}, {inner}]",
                    w.shape()
                )));
            }
        }
        Ok(Self { config, w_q, w_k, w_v })
    }

    /// Uniform `(-1/sqrt(d_model), 1/sqrt(d_model))` weights.
    pub fn random(config: RetentionConfig, d_model: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (d_model as f64).sqrt();
        let shape = [d_model, config.inner_dim()];
        let mut draw = || Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)));
        let (q, k, v) = (draw(), draw(), draw());
        Self::new(config, q, k, v)
    }

    /// Identity projections (`d_model == heads * d_k`).
    pub fn identity(config: RetentionConfig) -> Result<Self> {
        let n = config.inner_dim();
        Self::new(config, Tensor::eye(n), Tensor::eye(n), Tensor::eye(n))
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Projections {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Projections {
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
        }
    }

    fn eval(&self, x: &Tensor<T>, f: impl FnOnce(&Tape<T>, Var, &Projections) -> Result<Var>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let proj = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = f(&tape, xv, &proj)?;
        Ok(tape.value(out))
    }

    pub fn parallel(&self, x: &Tensor<T>, masks: &[DecayMask]) -> Result<Tensor<T>> {
        self.eval(x, |t, xv, p| retention_parallel(t, xv, &self.config, p, masks))
    }

    pub fn recurrent(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(x, |t, xv, p| retention_recurrent(t, xv, &self.config, p))
    }

    pub fn chunkwise(&self, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        self.eval(x, |t, xv, p| retention_chunkwise(t, xv, &self.config, p, chunk))
    }

    pub fn bidirectional(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(x, |t, xv, p| bi_retention(t, xv, &self.config, p))
    }

    pub fn masa_full(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        self.eval(x, |t, xv, p| masa_full(t, xv, &self.config, p, h, w))
    }

    pub fn resa_decomposed(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        self.eval(x, |t, xv, p| resa_decomposed(t, xv, &self.config, p, h, w))
    }

    /// Rotated `Q`, `K` and plain `V` for a row-major `h x w` grid, each `[heads, h*w, d_k]`.
    pub fn grid_qkv(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<[Tensor<T>; 3]> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.bind(&tape, false);
        let (q, k, v) = rotated_qkv(&tape, xv, &self.config, &p, &angles_2d(h, w, &self.config.theta))?;
        Ok([tape.value(q), tape.value(k), tape.value(v)])
    }
}

/// `x [n, d_model] @ w [d_model, heads*d_k]` reshaped to `[heads, n, d_k]`.
pub(crate) fn split_heads<T: Element>(tape: &Tape<T>, x: Var, w: Var, cfg: &RetentionConfig) -> Result<Var> {
    let n = tape.shape(x)[0];
    let y = tape.matmul(x, w)?;
    let y = tape.reshape(y, &[n, cfg.heads, cfg.d_k])?;
    Ok(tape.permute(y, &[1, 0, 2])?)
}

/// `[heads, n, d_k]` back to `[n, heads*d_k]`.
pub(crate) fn merge_heads<T: Element>(tape: &Tape<T>, o: Var) -> Result<Var> {
    let s = tape.shape(o);
    let y = tape.permute(o, &[1, 0, 2])?;
    Ok(tape.reshape(y, &[s[1], s[0] * s[2]])?)
}

pub(crate) fn check_tokens<T: Element>(tape: &Tape<T>, x: Var, cfg: &RetentionConfig) -> Result<usize> {
    cfg.validate()?;
    let s = tape.shape(x);
    if s.len() != 2 {
        return Err(SegError::Config(format!(
            "retention input must be [N, d_model], got {s:?}"
        )));
    }
    Ok(s[0])
}

/// `[heads, 1, 1]` constant holding `f(gamma_h)`.
pub(crate) fn per_head<T: Element>(tape: &Tape<T>, cfg: &RetentionConfig, f: impl Fn(f64) -> f64) -> Var {
    let data: Vec<T> = cfg.gammas.iter().map(|&g| T::lit(f(g))).collect();
    tape.constant(Tensor::from_vec_unchecked(&[cfg.heads, 1, 1], data).expect("heads entries"))
}
