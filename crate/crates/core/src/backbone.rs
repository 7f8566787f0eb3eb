//! Hierarchical retention encoder producing features at strides 4, 8, 16 and 32.

use rand::Rng;
use segkit_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::retention::{default_gammas, masa_full, resa_decomposed, Projections, RetentionConfig};

/// Input sides must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;
const PATCH: usize = 4;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Row attention then column attention.
    Decomposed,
    /// Attention over all tokens of the stage.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub heads: [usize; 4],
    /// Per stage, head `h` decays with `gamma = 1 - 2^(-offset - h)`.
    pub gamma_offsets: [f64; 4],
    /// Hidden width of the feed-forward layer as a multiple of the stage width.
    pub ffn_ratio: usize,
    pub attention_modes: [AttentionMode; 4],
    /// Zero the output layers of every attention and feed-forward branch.
    pub zero_init_branches: bool,
    /// Scale attention scores by `1/sqrt(d_k)`.
    pub softmax_scale: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl BackboneConfig {
    fn with(channels: [usize; 4], depths: [usize; 4], heads: [usize; 4], ffn_ratio: usize) -> Self {
        use AttentionMode::*;
        Self {
            stage_channels: channels,
            stage_depths: depths,
            heads,
            gamma_offsets: [5.0; 4],
            ffn_ratio,
            attention_modes: [Decomposed, Decomposed, Decomposed, Full],
            zero_init_branches: false,
            softmax_scale: true,
        }
    }

    /// Small enough for unit tests and desk-scale training.
    pub fn micro() -> Self {
        Self::with([16, 32, 64, 128], [1, 1, 2, 1], [1, 2, 4, 8], 4)
    }

    pub fn tiny() -> Self {
        Self::with([64, 128, 256, 512], [2, 2, 8, 2], [4, 4, 8, 16], 3)
    }

    pub fn small() -> Self {
        Self::with([64, 128, 256, 512], [3, 4, 18, 4], [4, 4, 8, 16], 3)
    }

    pub fn base() -> Self {
        Self::with([80, 160, 320, 512], [4, 8, 25, 8], [5, 5, 10, 16], 3)
    }

    pub fn large() -> Self {
        Self::with([112, 224, 448, 640], [4, 8, 25, 8], [7, 7, 14, 20], 3)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            _ => Err(SegError::Config(format!(
                "unknown backbone preset {name:?}; expected micro, tiny, small, base or large"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.stage_channels;
        if c.contains(&0) {
            return Err(SegError::Config("stage channels must be positive".into()));
        }
        if c.windows(2).any(|w| w[1] < w[0]) {
            return Err(SegError::Config(format!(
                "stage channels must be nondecreasing, got {c:?}"
            )));
        }
        for (i, (&ci, &h)) in c.iter().zip(&self.heads).enumerate() {
            if h == 0 || !ci.is_multiple_of(h) || !(ci / h).is_multiple_of(2) {
                return Err(SegError::Config(format!(
                    "stage {}: {ci} channels must split into {h} heads of even width",
                    i + 1
                )));
            }
        }
        if self.ffn_ratio == 0 {
            return Err(SegError::Config("ffn_ratio must be at least 1".into()));
        }
        Ok(())
    }

    pub fn retention_config(&self, stage: usize) -> Result<RetentionConfig> {
        let heads = self.heads[stage];
        let mut cfg = RetentionConfig::new(heads, self.stage_channels[stage] / heads)?
            .with_gammas(default_gammas(heads, self.gamma_offsets[stage]))?;
        cfg.softmax_scale = self.softmax_scale;
        Ok(cfg)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.stage_channels;
        let mut total = PATCH * PATCH * 3 * c[0] + c[0];
        for i in 0..4 {
            if i > 0 {
                total += 4 * c[i - 1] * c[i] + c[i];
            }
            let hidden = self.ffn_ratio * c[i];
            let block = 4 * c[i] + 4 * c[i] * c[i] + c[i] + 2 * c[i] * hidden + hidden + c[i];
            total += self.stage_depths[i] * block + 2 * c[i];
        }
        total
    }

    /// Spatial size of every pyramid level for an `h x w` input.
    pub fn level_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
        std::array::from_fn(|i| (h / (PATCH << i), w / (PATCH << i)))
    }
}

/// Rejects inputs whose sides are not positive multiples of 32.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(SegError::InputSize {
            h,
            w,
            multiple: INPUT_MULTIPLE,
        });
    }
    Ok(())
}

/// Four feature maps `[C_i, h_i, w_i]`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: [Tensor<T>; 4],
}

impl<T: Element> FeaturePyramid<T> {
    pub fn shapes(&self) -> [Vec<usize>; 4] {
        std::array::from_fn(|i| self.levels[i].shape().to_vec())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    out: Linear,
    norm2: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Stage {
    merge: Option<Linear>,
    blocks: Vec<Block>,
    norm: Norm,
    retention: RetentionConfig,
    mode: AttentionMode,
}

/// Parameter layout of the encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Linear,
    stages: Vec<Stage>,
}

struct Init<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Element, R: Rng> Init<'_, T, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Result<Linear> {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            uniform(self.rng, &[fan_in, fan_out], fan_in)
        };
        Ok(Linear {
            w: self.store.add(format!("{name}.w"), w)?,
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let w = uniform(self.rng, &[fan_in, fan_out], fan_in);
        self.store.add(name, w)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
        })
    }
}

fn linear<T: Element>(tape: &Tape<T>, p: &Bound, l: &Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p[l.w])?;
    Ok(tape.add(y, p[l.b])?)
}

fn norm<T: Element>(tape: &Tape<T>, p: &Bound, n: &Norm, x: Var) -> Result<Var> {
    Ok(tape.layer_norm(x, p[n.gamma], p[n.beta], T::lit(LN_EPS))?)
}

/// `[c, h, w]` feature map to `[h*w, c]` tokens.
pub fn to_tokens<T: Element>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(tape.transpose(flat)?)
}

/// `[h*w, c]` tokens to a `[c, h, w]` feature map.
pub fn to_map<T: Element>(tape: &Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    let t = tape.transpose(x)?;
    Ok(tape.reshape(t, &[c, h, w])?)
}

impl Backbone {
    /// Allocates and initializes every encoder parameter under `prefix`.
    pub fn new<T: Element>(
        config: BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.stage_channels;
        let zero = config.zero_init_branches;
        let mut init = Init { store, rng };
        let stem = init.linear(&format!("{prefix}.stem"), PATCH * PATCH * 3, c[0], false)?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let sp = format!("{prefix}.stage{}", i + 1);
            let merge = if i > 0 {
                Some(init.linear(&format!("{sp}.merge"), 4 * c[i - 1], c[i], false)?)
            } else {
                None
            };
            let hidden = config.ffn_ratio * c[i];
            let mut blocks = Vec::with_capacity(config.stage_depths[i]);
            for b in 0..config.stage_depths[i] {
                let bp = format!("{sp}.block{b}");
                blocks.push(Block {
                    norm1: init.norm(&format!("{bp}.norm1"), c[i])?,
                    w_q: init.weight(&format!("{bp}.attn.w_q"), c[i], c[i])?,
                    w_k: init.weight(&format!("{bp}.attn.w_k"), c[i], c[i])?,
                    w_v: init.weight(&format!("{bp}.attn.w_v"), c[i], c[i])?,
                    out: init.linear(&format!("{bp}.attn.out"), c[i], c[i], zero)?,
                    norm2: init.norm(&format!("{bp}.norm2"), c[i])?,
                    ffn_in: init.linear(&format!("{bp}.ffn.in"), c[i], hidden, false)?,
                    ffn_out: init.linear(&format!("{bp}.ffn.out"), hidden, c[i], zero)?,
                });
            }
            stages.push(Stage {
                merge,
                blocks,
                norm: init.norm(&format!("{sp}.norm"), c[i])?,
                retention: config.retention_config(i)?,
                mode: config.attention_modes[i],
            });
        }
        Ok(Self { config, stem, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Stride-4 patch embedding: `[3, H, W]` to `[H/4 * W/4, C_1]` tokens.
    pub fn patch_embed<T: Element>(&self, tape: &Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(SegError::Config(format!("expected a [3, H, W] image, got {s:?}")));
        }
        check_input_size(s[1], s[2])?;
        let (h, w) = (s[1] / PATCH, s[2] / PATCH);
        let x = tape.reshape(image, &[3, h, PATCH, w, PATCH])?;
        let x = tape.permute(x, &[1, 3, 0, 2, 4])?;
        let x = tape.reshape(x, &[h * w, 3 * PATCH * PATCH])?;
        linear(tape, p, &self.stem, x)
    }

    /// Pre-norm residual block on `[h*w, C]` tokens of stage `stage`.
    #[allow(clippy::too_many_arguments)]
    pub fn block_forward<T: Element>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        stage: usize,
        block: usize,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let st = &self.stages[stage];
        let b = &st.blocks[block];
        let proj = Projections {
            w_q: p[b.w_q],
            w_k: p[b.w_k],
            w_v: p[b.w_v],
        };
        let y = norm(tape, p, &b.norm1, x)?;
        let y = match st.mode {
            AttentionMode::Decomposed => resa_decomposed(tape, y, &st.retention, &proj, h, w)?,
            AttentionMode::Full => masa_full(tape, y, &st.retention, &proj, h, w)?,
        };
        let y = linear(tape, p, &b.out, y)?;
        let x = tape.add(x, y)?;
        let y = norm(tape, p, &b.norm2, x)?;
        let y = linear(tape, p, &b.ffn_in, y)?;
        let y = tape.gelu(y)?;
        let y = linear(tape, p, &b.ffn_out, y)?;
        Ok(tape.add(x, y)?)
    }

    /// 2x2 neighborhood merge: `[h*w, C]` to `[h/2 * w/2, C']`.
    fn merge<T: Element>(&self, tape: &Tape<T>, p: &Bound, l: &Linear, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = tape.shape(x)[1];
        let x = tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
        let x = tape.permute(x, &[0, 2, 1, 3, 4])?;
        let x = tape.reshape(x, &[(h / 2) * (w / 2), 4 * c])?;
        linear(tape, p, l, x)
    }

    /// Returns the four levels as `[C_i, h_i, w_i]` variables.
    pub fn forward<T: Element>(&self, tape: &Tape<T>, p: &Bound, image: Var) -> Result<[Var; 4]> {
        let mut x = self.patch_embed(tape, p, image)?;
        let s = tape.shape(image);
        let (mut h, mut w) = (s[1] / PATCH, s[2] / PATCH);
        let mut levels = Vec::with_capacity(4);
        for (i, st) in self.stages.iter().enumerate() {
            if let Some(m) = &st.merge {
                x = self.merge(tape, p, m, x, h, w)?;
                h /= 2;
                w /= 2;
            }
            for b in 0..st.blocks.len() {
                x = self.block_forward(tape, p, i, b, x, h, w)?;
            }
            let y = norm(tape, p, &st.norm, x)?;
            levels.push(to_map(tape, y, h, w)?);
        }
        Ok([levels[0], levels[1], levels[2], levels[3]])
    }

    /// Inference-only forward pass.
    pub fn features<T: Element>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let img = tape.constant(image.clone());
        let vars = self.forward(&tape, &p, img)?;
        Ok(FeaturePyramid {
            levels: vars.map(|v| tape.value(v)),
        })
    }
}
