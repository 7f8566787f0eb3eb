//! Lightweight decoder: per-level linear projection, zero-initialized 1x1
//! residual, fusion at quarter resolution and per-pixel classification.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use segkit_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::params::{uniform, Bound, ParamId, ParamStore};

/// Direction of the zero-initialized residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    /// `F'_i = f_i + ZeroConv_{C -> C_i}(F_i)`; fused width is `sum C_i`.
    #[default]
    Literal,
    /// `F'_i = F_i + ZeroConv_{C_i -> C}(f_i)`; fused width is `4 C`.
    Projected,
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Projected => "projected",
        })
    }
}

impl FromStr for DecoderVariant {
    type Err = SegError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "projected" => Ok(Self::Projected),
            _ => Err(SegError::Config(format!(
                "unknown decoder variant {s:?}; expected literal or projected"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Hidden width `C` of the per-level projections.
    pub hidden: usize,
    pub n_cls: usize,
    pub variant: DecoderVariant,
    pub zir_enabled: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            n_cls: 5,
            variant: DecoderVariant::Literal,
            zir_enabled: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(SegError::Config("decoder hidden width must be at least 1".into()));
        }
        if self.n_cls < 2 {
            return Err(SegError::Config(format!(
                "decoder needs at least 2 classes, got {}",
                self.n_cls
            )));
        }
        Ok(())
    }

    /// Width of the fused map `M`.
    pub fn fused_channels(&self, channels: &[usize]) -> usize {
        match self.variant {
            DecoderVariant::Literal => channels.iter().sum(),
            DecoderVariant::Projected => channels.len() * self.hidden,
        }
    }

    /// Parameters of the zero-initialized convolutions alone.
    pub fn zir_param_count(&self, channels: &[usize]) -> usize {
        let c = self.hidden;
        channels
            .iter()
            .map(|&ci| match self.variant {
                DecoderVariant::Literal => c * ci + ci,
                DecoderVariant::Projected => ci * c + c,
            })
            .sum()
    }
}

/// Closed-form decoder parameter count for encoder widths `channels`.
pub fn count_params(config: &DecoderConfig, channels: &[usize]) -> usize {
    let c = config.hidden;
    let linear: usize = channels.iter().map(|&ci| ci * c + c).sum();
    let zir = if config.zir_enabled {
        config.zir_param_count(channels)
    } else {
        0
    };
    let fused = config.fused_channels(channels);
    linear + zir + fused * config.n_cls + config.n_cls
}

/// Per-pixel affine map `[C_i, h, w] -> [C, h, w]` (`w` is `[C, C_i]`).
pub fn linear_project<T: Element>(tape: &Tape<T>, f: Var, w: Var, b: Var) -> Result<Var> {
    Ok(tape.pointwise_conv(f, w, b)?)
}

/// Residual combination of the encoder feature `f` and its projection `proj`.
/// `conv` is `None` when the residual is disabled.
pub fn zir_residual<T: Element>(
    tape: &Tape<T>,
    f: Var,
    proj: Var,
    conv: Option<(Var, Var)>,
    variant: DecoderVariant,
) -> Result<Var> {
    let (fs, ps) = (tape.shape(f), tape.shape(proj));
    if fs[1..] != ps[1..] {
        return Err(SegError::Config(format!(
            "residual inputs differ spatially: {fs:?} vs {ps:?}"
        )));
    }
    let (base, other) = match variant {
        DecoderVariant::Literal => (f, proj),
        DecoderVariant::Projected => (proj, f),
    };
    match conv {
        None => Ok(base),
        Some((w, b)) => {
            let r = tape.pointwise_conv(other, w, b)?;
            Ok(tape.add(base, r)?)
        }
    }
}

/// Bilinear resize to `(h/4, w/4)`; a no-op for the stride-4 level.
pub fn upsample_quarter<T: Element>(tape: &Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(SegError::Config(format!("output size {h}x{w} is not a multiple of 4")));
    }
    let s = tape.shape(x);
    if s[1] == h / 4 && s[2] == w / 4 {
        return Ok(x);
    }
    Ok(tape.bilinear_resize(x, h / 4, w / 4)?)
}

/// Channel concatenation in level order.
pub fn fuse_concat<T: Element>(tape: &Tape<T>, parts: &[Var]) -> Result<Var> {
    let first = parts
        .first()
        .map(|&p| tape.shape(p))
        .ok_or_else(|| SegError::Config("nothing to fuse".into()))?;
    if let Some(bad) = parts.iter().map(|&p| tape.shape(p)).find(|s| s[1..] != first[1..]) {
        return Err(SegError::Config(format!(
            "fused levels differ spatially: {first:?} vs {bad:?}"
        )));
    }
    Ok(tape.concat(parts, 0)?)
}

/// Per-pixel logits `[n_cls, h/4, w/4]` resized to `[n_cls, h, w]`.
pub fn classify<T: Element>(tape: &Tape<T>, m: Var, w: Var, b: Var, h: usize, width: usize) -> Result<Var> {
    let logits = tape.pointwise_conv(m, w, b)?;
    let s = tape.shape(logits);
    if s[1] == h && s[2] == width {
        return Ok(logits);
    }
    Ok(tape.bilinear_resize(logits, h, width)?)
}

#[derive(Clone, Debug)]
struct Level {
    w: ParamId,
    b: ParamId,
    zir: Option<(ParamId, ParamId)>,
}

/// Parameter layout of the decoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    channels: Vec<usize>,
    levels: Vec<Level>,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl Decoder {
    pub fn new<T: Element>(
        config: DecoderConfig,
        channels: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        if channels.is_empty() || channels.contains(&0) {
            return Err(SegError::Config(format!("invalid encoder widths {channels:?}")));
        }
        let c = config.hidden;
        let mut levels = Vec::with_capacity(channels.len());
        for (i, &ci) in channels.iter().enumerate() {
            let lp = format!("{prefix}.level{}", i + 1);
            let w = store.add(format!("{lp}.linear.w"), uniform(rng, &[c, ci], ci))?;
            let b = store.add(format!("{lp}.linear.b"), Tensor::zeros(&[c]))?;
            let zir = if config.zir_enabled {
                let (out, inp) = match config.variant {
                    DecoderVariant::Literal => (ci, c),
                    DecoderVariant::Projected => (c, ci),
                };
                Some((
                    store.add(format!("{lp}.zir.w"), Tensor::zeros(&[out, inp]))?,
                    store.add(format!("{lp}.zir.b"), Tensor::zeros(&[out]))?,
                ))
            } else {
                None
            };
            levels.push(Level { w, b, zir });
        }
        let fused = config.fused_channels(channels);
        let cls_w = store.add(
            format!("{prefix}.classifier.w"),
            uniform(rng, &[config.n_cls, fused], fused),
        )?;
        let cls_b = store.add(format!("{prefix}.classifier.b"), Tensor::zeros(&[config.n_cls]))?;
        Ok(Self {
            config,
            channels: channels.to_vec(),
            levels,
            cls_w,
            cls_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Logits `[n_cls, h, w]` from encoder features `[C_i, h_i, w_i]`.
    pub fn forward<T: Element>(&self, tape: &Tape<T>, p: &Bound, features: &[Var], h: usize, w: usize) -> Result<Var> {
        if features.len() != self.levels.len() {
            return Err(SegError::Config(format!(
                "decoder expects {} feature levels, got {}",
                self.levels.len(),
                features.len()
            )));
        }
        let mut fused = Vec::with_capacity(features.len());
        for ((&f, level), &ci) in features.iter().zip(&self.levels).zip(&self.channels) {
            let got = tape.shape(f)[0];
            if got != ci {
                return Err(SegError::Config(format!(
                    "feature level has {got} channels, decoder was built for {ci}"
                )));
            }
            let proj = linear_project(tape, f, p[level.w], p[level.b])?;
            let conv = level.zir.map(|(cw, cb)| (p[cw], p[cb]));
            let r = zir_residual(tape, f, proj, conv, self.config.variant)?;
            fused.push(upsample_quarter(tape, r, h, w)?);
        }
        let m = fuse_concat(tape, &fused)?;
        classify(tape, m, p[self.cls_w], p[self.cls_b], h, w)
    }
}
