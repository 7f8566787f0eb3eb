//! Finite-difference audit of every differentiable operation, the retention
//! operators, encoder blocks, decoder stages and a two-block model (f64).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit_tensor::gradcheck::{check_gradients, relative_error, DEFAULT_STEP};
use segkit_tensor::{Tape, Tensor, Var};
use serde::Serialize;

use crate::backbone::{AttentionMode, Backbone, BackboneConfig};
use crate::data::DEFAULT_IGNORE_INDEX;
use crate::decoder::{
    classify, fuse_concat, linear_project, upsample_quarter, zir_residual, DecoderConfig, DecoderVariant,
};
use crate::error::Result;
use crate::model::SegModel;
use crate::params::{Bound, ParamStore};
use crate::retention::{
    bi_retention, masa_full, resa_decomposed, retention_chunkwise, retention_parallel, retention_recurrent,
    Projections, RetentionConfig,
};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Coordinates probed per tensor in the sampled checks.
const SAMPLED_COORDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.rel_error < GRAD_TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(y * r)` with a fixed random `r`, so every output element matters.
fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(rand_tensor(&mut rng, &tape.shape(y)));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p)?)
}

struct Suite {
    rng: ChaCha8Rng,
    cases: Vec<GradCase>,
}

impl Suite {
    fn t(&mut self, shape: &[usize]) -> Tensor<f64> {
        rand_tensor(&mut self.rng, shape)
    }

    /// Every coordinate of every input.
    fn full<F>(&mut self, name: &str, inputs: &[Tensor<f64>], build: F) -> Result<()>
    where
        F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    {
        let seed = self.cases.len() as u64;
        let report = check_gradients(
            |t, v| {
                let y = build(t, v).map_err(|e| segkit_tensor::TensorError::Invalid(e.to_string()))?;
                weighted_sum(t, y, seed).map_err(|e| segkit_tensor::TensorError::Invalid(e.to_string()))
            },
            inputs,
            DEFAULT_STEP,
        )?;
        self.cases.push(GradCase {
            name: name.to_string(),
            rel_error: report.max_rel_error(),
        });
        Ok(())
    }

    /// Sampled coordinates of every stored parameter and extra input; the
    /// relative error is taken over the concatenated samples.
    fn sampled<F>(&mut self, name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], loss: F) -> Result<()>
    where
        F: Fn(&Tape<f64>, &Bound, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let xs: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = loss(&tape, &p, &xs)?;
        let grads = tape.backward(out)?;

        let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
            let tape = Tape::new();
            let p = s.bind(&tape, false);
            let xs: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(tape.value(loss(&tape, &p, &xs)?).item())
        };
        let h = DEFAULT_STEP;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get(id);
            let g = grads.get_or_zeros(p[id], t.shape());
            for i in coords(t.numel(), &mut self.rng) {
                let mut s = store.clone();
                s.set(id, nudged(t, i, h))?;
                let up = eval(&s, inputs)?;
                s.set(id, nudged(t, i, -h))?;
                let down = eval(&s, inputs)?;
                analytic.push(g.data()[i]);
                numeric.push((up - down) / (2.0 * h));
            }
        }
        for (j, x) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(xs[j], x.shape());
            for i in coords(x.numel(), &mut self.rng) {
                let mut ins = inputs.to_vec();
                ins[j] = nudged(x, i, h);
                let up = eval(store, &ins)?;
                ins[j] = nudged(x, i, -h);
                let down = eval(store, &ins)?;
                analytic.push(g.data()[i]);
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let n = analytic.len();
        let rel = relative_error(&Tensor::new(&[n], analytic)?, &Tensor::new(&[n], numeric)?);
        self.cases.push(GradCase {
            name: name.to_string(),
            rel_error: rel,
        });
        Ok(())
    }
}

fn coords(numel: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= SAMPLED_COORDS {
        (0..numel).collect()
    } else {
        sample(rng, numel, SAMPLED_COORDS).into_vec()
    }
}

fn nudged(t: &Tensor<f64>, i: usize, by: f64) -> Tensor<f64> {
    let mut v = t.to_vec();
    v[i] += by;
    Tensor::new(t.shape(), v).expect("shape is unchanged")
}

fn proj(v: &[Var]) -> Projections {
    Projections {
        w_q: v[1],
        w_k: v[2],
        w_v: v[3],
    }
}

fn tensor_ops(s: &mut Suite) -> Result<()> {
    let (a, b, row) = (s.t(&[3, 4]), s.t(&[3, 4]), s.t(&[4]));
    s.full("add", &[a.clone(), row.clone()], |t, v| Ok(t.add(v[0], v[1])?))?;
    s.full("sub", &[a.clone(), b.clone()], |t, v| Ok(t.sub(v[0], v[1])?))?;
    s.full("mul", &[a.clone(), row.clone()], |t, v| Ok(t.mul(v[0], v[1])?))?;
    s.full("scale", std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)?))?;
    let (m1, m2) = (s.t(&[2, 3, 4]), s.t(&[4, 5]));
    s.full("matmul", &[m1.clone(), m2], |t, v| Ok(t.matmul(v[0], v[1])?))?;
    s.full("permute", std::slice::from_ref(&m1), |t, v| {
        Ok(t.permute(v[0], &[2, 0, 1])?)
    })?;
    s.full("transpose", std::slice::from_ref(&m1), |t, v| Ok(t.transpose(v[0])?))?;
    s.full("reshape", std::slice::from_ref(&m1), |t, v| {
        Ok(t.reshape(v[0], &[6, 4])?)
    })?;
    s.full("softmax", std::slice::from_ref(&m1), |t, v| Ok(t.softmax(v[0], 1)?))?;
    s.full("sum", std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])?))?;
    s.full("mean", std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])?))?;
    s.full("gelu", &[a.map(|x| 3.0 * x)], |t, v| Ok(t.gelu(v[0])?))?;
    let (g, bt) = (s.t(&[4]), s.t(&[4]));
    s.full("layer_norm", &[a.clone(), g, bt], |t, v| {
        Ok(t.layer_norm(v[0], v[1], v[2], 1e-5)?)
    })?;
    let angles = Tensor::from_fn(&[3, 2], |i| 0.4 * i as f64);
    s.full("rotate_pairs", std::slice::from_ref(&m1), |t, v| {
        Ok(t.rotate_pairs(v[0], &angles, false)?)
    })?;
    s.full("bilinear_resize", std::slice::from_ref(&m1), |t, v| {
        Ok(t.bilinear_resize(v[0], 5, 7)?)
    })?;
    let (w, bias) = (s.t(&[5, 2]), s.t(&[5]));
    s.full("pointwise_conv", &[m1.clone(), w, bias], |t, v| {
        Ok(t.pointwise_conv(v[0], v[1], v[2])?)
    })?;
    let logits = s.t(&[3, 2, 3]);
    let target = [0, 2, DEFAULT_IGNORE_INDEX, 1, 1, 0];
    s.full("cross_entropy", &[logits], |t, v| {
        Ok(t.cross_entropy(v[0], &target, DEFAULT_IGNORE_INDEX)?.loss)
    })?;
    s.full(
        "concat",
        &[a.clone(), b.clone()],
        |t, v| Ok(t.concat(&[v[0], v[1]], 0)?),
    )?;
    s.full("narrow", &[m1], |t, v| Ok(t.narrow(v[0], 2, 1, 2)?))?;
    let (q, k, vv, d) = (s.t(&[2, 3, 5]), s.t(&[2, 4, 5]), s.t(&[2, 4, 3]), s.t(&[3, 4]));
    s.full("decayed_attention", &[q, k, vv, d], |t, v| {
        Ok(t.decayed_attention(v[0], v[1], v[2], v[3], 0.6)?)
    })
}

fn retention_ops(s: &mut Suite) -> Result<()> {
    let cfg = RetentionConfig::new(2, 4)?.with_gamma(0.8)?;
    let x = s.t(&[6, 8]);
    let ws: Vec<Tensor<f64>> = (0..3).map(|_| s.t(&[8, 8]).map(|x| 0.5 * x)).collect();
    let inputs = [x, ws[0].clone(), ws[1].clone(), ws[2].clone()];
    let masks = cfg.causal_masks(6)?;
    s.full("retention_parallel", &inputs, |t, v| {
        retention_parallel(t, v[0], &cfg, &proj(v), &masks)
    })?;
    s.full("retention_recurrent", &inputs, |t, v| {
        retention_recurrent(t, v[0], &cfg, &proj(v))
    })?;
    s.full("retention_chunkwise", &inputs, |t, v| {
        retention_chunkwise(t, v[0], &cfg, &proj(v), 4)
    })?;
    s.full("bi_retention", &inputs, |t, v| bi_retention(t, v[0], &cfg, &proj(v)))?;
    s.full("masa_full", &inputs, |t, v| masa_full(t, v[0], &cfg, &proj(v), 2, 3))?;
    s.full("resa_decomposed", &inputs, |t, v| {
        resa_decomposed(t, v[0], &cfg, &proj(v), 2, 3)
    })
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_channels: [8, 8, 8, 8],
        stage_depths: [1, 1, 1, 1],
        heads: [2, 2, 2, 2],
        ffn_ratio: 2,
        ..BackboneConfig::micro()
    }
}

fn encoder_blocks(s: &mut Suite) -> Result<()> {
    let cfg = small_backbone();
    let mut store = ParamStore::new();
    let bb = Backbone::new(cfg.clone(), &mut store, &mut s.rng, "bb")?;
    let x = s.t(&[16, 8]);
    for stage in [0, 3] {
        let name = match cfg.attention_modes[stage] {
            AttentionMode::Decomposed => "block_decomposed_4x4",
            AttentionMode::Full => "block_full_4x4",
        };
        let seed = stage as u64 + 100;
        s.sampled(name, &store, std::slice::from_ref(&x), |t, p, v| {
            let y = bb.block_forward(t, p, stage, 0, v[0], 4, 4)?;
            weighted_sum(t, y, seed)
        })?;
    }
    let image = s.t(&[3, 32, 32]);
    s.sampled("patch_embed", &store, &[image], |t, p, v| {
        let y = bb.patch_embed(t, p, v[0])?;
        weighted_sum(t, y, 102)
    })
}

fn decoder_stages(s: &mut Suite) -> Result<()> {
    let (f, w, b) = (s.t(&[6, 4, 4]), s.t(&[3, 6]), s.t(&[3]));
    s.full("linear_project", &[f.clone(), w, b], |t, v| {
        linear_project(t, v[0], v[1], v[2])
    })?;
    let proj_map = s.t(&[3, 4, 4]);
    for (variant, wshape, name) in [
        (DecoderVariant::Literal, [6, 3], "zir_residual_literal"),
        (DecoderVariant::Projected, [3, 6], "zir_residual_projected"),
    ] {
        let (zw, zb) = (s.t(&wshape), s.t(&[wshape[0]]));
        s.full(name, &[f.clone(), proj_map.clone(), zw, zb], |t, v| {
            zir_residual(t, v[0], v[1], Some((v[2], v[3])), variant)
        })?;
    }
    let coarse = s.t(&[2, 2, 3]);
    s.full("upsample_quarter", &[coarse], |t, v| upsample_quarter(t, v[0], 16, 24))?;
    let (p1, p2) = (s.t(&[2, 3, 3]), s.t(&[4, 3, 3]));
    s.full("fuse_concat", &[p1, p2], |t, v| fuse_concat(t, &[v[0], v[1]]))?;
    let (m, cw, cb) = (s.t(&[6, 4, 4]), s.t(&[5, 6]), s.t(&[5]));
    s.full("classify_resize", &[m, cw, cb], |t, v| {
        classify(t, v[0], v[1], v[2], 16, 16)
    })
}

/// Micro encoder cut to one block in each of the first two stages, with the
/// default decoder, trained against random labels.
fn end_to_end(s: &mut Suite) -> Result<()> {
    let bb = BackboneConfig {
        stage_depths: [1, 1, 0, 0],
        ..BackboneConfig::micro()
    };
    let dec = DecoderConfig::default();
    let model = SegModel::<f64>::new(bb, dec.clone(), 7)?;
    let image = s.t(&[3, 32, 32]);
    let labels: Vec<u32> = (0..32 * 32).map(|_| s.rng.random_range(0..dec.n_cls as u32)).collect();
    s.sampled("end_to_end_micro_2block", &model.params, &[image], |t, p, v| {
        let logits = model.forward(t, p, v[0])?;
        Ok(t.cross_entropy(logits, &labels, DEFAULT_IGNORE_INDEX)?.loss)
    })
}

/// Runs every case; the returned list is in a fixed order.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };
    tensor_ops(&mut s)?;
    retention_ops(&mut s)?;
    encoder_blocks(&mut s)?;
    decoder_stages(&mut s)?;
    end_to_end(&mut s)?;
    Ok(s.cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_coordinates_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(coords(4, &mut rng), vec![0, 1, 2, 3]);
        let mut c = coords(100, &mut rng);
        c.sort_unstable();
        c.dedup();
        assert_eq!(c.len(), SAMPLED_COORDS);
    }

    #[test]
    fn case_pass_threshold() {
        let ok = GradCase {
            name: "x".into(),
            rel_error: 1e-7,
        };
        assert!(ok.passed());
        let bad = GradCase {
            rel_error: f64::NAN,
            ..ok
        };
        assert!(!bad.passed());
    }
}
