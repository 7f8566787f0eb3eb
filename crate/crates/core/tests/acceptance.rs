//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the console.

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit::backbone::BackboneConfig;
use segkit::bench::{self, BenchSettings};
use segkit::data::{generate_synthetic, LabelMap, SyntheticSpec};
use segkit::decoder::{count_params, DecoderConfig, DecoderVariant};
use segkit::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use segkit::metrics::{evaluate, multi_scale_infer, single_scale_infer, ConfusionMatrix};
use segkit::model::{SegModel, Segmenter};
use segkit::retention::{
    build_2d_decay, build_axial_decays, build_bidirectional_decay, build_causal_decay, RetentionConfig, RetentionParams,
};
use segkit::trainer::{train_loop, Augment, LrSchedule, OptimState, TrainConfig};
use segkit_tensor::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    }};
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

const GAMMAS: [f64; 3] = [0.5, 0.9, 1.0 - 1.0 / 32.0];

/// Causal retention straight from the definition, with each query/key pair
/// treated as a complex number rotated by `e^{i n theta}`.
fn retention_oracle(p: &RetentionParams<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let cfg = &p.config;
    let (n, dm, dk) = (x.shape()[0], p.d_model(), cfg.d_k);
    let inner = cfg.inner_dim();
    let project = |w: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; n * inner];
        for t in 0..n {
            for c in 0..inner {
                out[t * inner + c] = (0..dm).map(|i| x.data()[t * dm + i] * w.data()[i * inner + c]).sum();
            }
        }
        out
    };
    let (q, k, v) = (project(&p.w_q), project(&p.w_k), project(&p.w_v));
    let mut out = vec![0.0; n * inner];
    for h in 0..cfg.heads {
        let base = h * dk;
        for a in 0..n {
            for b in 0..=a {
                let delta = (a - b) as f64;
                let mut score = 0.0;
                for (j, theta) in cfg.theta.iter().enumerate() {
                    let (qr, qi) = (q[a * inner + base + 2 * j], q[a * inner + base + 2 * j + 1]);
                    let (kr, ki) = (k[b * inner + base + 2 * j], k[b * inner + base + 2 * j + 1]);
                    // Re[(qr + i qi)(kr - i ki) e^{i delta theta}]
                    let (re, im) = (qr * kr + qi * ki, qi * kr - qr * ki);
                    let (c, s) = ((delta * theta).cos(), (delta * theta).sin());
                    score += re * c - im * s;
                }
                let wgt = cfg.gammas[h].powi((a - b) as i32) * score;
                for c in 0..dk {
                    out[a * inner + base + c] += wgt * v[b * inner + base + c];
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_oracle) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let n = rng.random_range(1..=64);
        let d_k = 2 * rng.random_range(1..=16);
        let heads = rng.random_range(1..=2);
        let gamma = GAMMAS[case % 3];
        let d_model = rng.random_range(2..=24);
        let cfg = ok(RetentionConfig::new(heads, d_k).and_then(|c| c.with_gamma(gamma)))?;
        let p = ok(RetentionParams::<f64>::random(cfg, d_model, &mut rng))?;
        let x = random_tensor(&mut rng, &[n, d_model]);
        let chunk = rng.random_range(1..=n);
        let par = ok(p.parallel(&x, &ok(p.config.causal_masks(n))?))?;
        let rec = ok(p.recurrent(&x))?;
        let chk = ok(p.chunkwise(&x, chunk))?;
        worst = worst.max(par.max_abs_diff(&rec)).max(par.max_abs_diff(&chk));
        worst_oracle = worst_oracle.max(max_diff(par.data(), &retention_oracle(&p, &x)));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail =
        format!("100 cases, paradigms differ by {worst:.1e}, definition oracle by {worst_oracle:.1e}, {secs:.2} s");
    ensure!(worst < 1e-10 && worst_oracle < 1e-10, "{detail}");
    ensure!(secs < 5.0, "{detail}");
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let gammas = [0.5, 0.75, 0.9, 1.0 - 1.0 / 32.0, 1.0];
    let mut checked = 0usize;
    let mut worst_closed_2d = 0.0f64;
    for &g in &gammas {
        for n in 1..=16usize {
            let causal = ok(build_causal_decay(g, n))?;
            let bi = ok(build_bidirectional_decay(g, n))?;
            for a in 0..n {
                for b in 0..n {
                    let c = if a >= b { g.powi((a - b) as i32) } else { 0.0 };
                    ensure!(causal.get(a, b) == c, "causal gamma={g} n={n} ({a},{b})");
                    ensure!(
                        bi.get(a, b) == g.powi(a.abs_diff(b) as i32),
                        "bidirectional gamma={g} n={n} ({a},{b})"
                    );
                    checked += 2;
                }
            }
        }
        for h in 1..=16usize {
            for w in 1..=16usize {
                let d2 = ok(build_2d_decay(g, h, w))?;
                let (dh, dw) = ok(build_axial_decays(g, h, w))?;
                let n = h * w;
                let (m2, mh, mw) = (d2.matrix().data(), dh.matrix().data(), dw.matrix().data());
                for p in 0..n {
                    for q in 0..n {
                        let (yp, xp, yq, xq) = (p / w, p % w, q / w, q % w);
                        let v = m2[p * n + q];
                        ensure!(
                            v == mh[yp * h + yq] * mw[xp * w + xq],
                            "factorization gamma={g} {h}x{w} ({p},{q})"
                        );
                        let closed = g.powi((yp.abs_diff(yq) + xp.abs_diff(xq)) as i32);
                        worst_closed_2d = worst_closed_2d.max((v - closed).abs() / closed);
                        if g == 0.5 || g == 0.75 || g == 1.0 {
                            ensure!(v == closed, "2D closed form gamma={g} {h}x{w} ({p},{q})");
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{checked} entries checked exactly; 2D vs gamma^(|dx|+|dy|) rel {worst_closed_2d:.1e} for inexact gammas, {secs:.2} s"
    );
    ensure!(worst_closed_2d < 1e-14, "{detail}");
    ensure!(secs < 1.0, "{detail}");
    Ok(detail)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let heads = rng.random_range(1..=2);
        let d_k = 2 * rng.random_range(1..=4);
        let gammas = (0..heads).map(|_| rng.random_range(0.3..1.0)).collect();
        let cfg = ok(RetentionConfig::new(heads, d_k).and_then(|c| c.with_gammas(gammas)))?;
        let d_model = rng.random_range(2..=12);
        let p = ok(RetentionParams::<f64>::random(cfg, d_model, &mut rng))?;
        let len = rng.random_range(1..=16);
        let (h, w) = if rng.random_bool(0.5) { (1, len) } else { (len, 1) };
        let x = random_tensor(&mut rng, &[h * w, d_model]);
        let full = ok(p.masa_full(&x, h, w))?;
        let dec = ok(p.resa_decomposed(&x, h, w))?;
        worst = worst.max(full.max_abs_diff(&dec));
    }
    ensure!(worst < 1e-10, "strip mismatch {worst:e}");

    let sweep = ok(bench::run_attention_sweep(
        &[(16, 16), (32, 32), (64, 64)],
        &BenchSettings::default(),
    ))?;
    let ratios = bench::speedup_ratios(&sweep.records);
    ensure!(ratios.len() == 3, "sweep skipped sizes: {:?}", sweep.skipped);
    let shown: Vec<String> = ratios
        .iter()
        .map(|(h, r)| format!("H={h} {r:.1}/{:.0}", *h as f64 / 2.0))
        .collect();
    let detail = format!("50 strips within {worst:.1e}; measured/analytic {}", shown.join(", "));
    for &(h, r) in &ratios {
        let analytic = h as f64 / 2.0;
        ensure!(
            (r - analytic).abs() <= 0.3 * analytic,
            "{detail}; H={h} outside +-30% of {analytic}"
        );
    }
    ensure!(
        ratios.windows(2).all(|p| p[1].1 > p[0].1),
        "{detail}; ratio does not grow with H"
    );
    Ok(detail)
}

fn decoder_cfg(variant: DecoderVariant, zir: bool) -> DecoderConfig {
    DecoderConfig {
        hidden: 32,
        n_cls: 5,
        variant,
        zir_enabled: zir,
    }
}

fn one_step(model: &mut SegModel<f64>, data: &[segkit::data::SegmentationSample]) -> Result<(), String> {
    let cfg = TrainConfig {
        iterations: 1,
        batch_size: 2,
        warmup_iters: 0,
        schedule: LrSchedule::Constant,
        ..TrainConfig::default()
    };
    let mut optim = OptimState::new(cfg.optimizer.clone(), &model.params);
    let records = ok(train_loop(
        model,
        &mut optim,
        data,
        &cfg,
        &Augment::default(),
        0,
        0,
        1,
        |_| {},
    ))?;
    ensure!(records[0].loss > 0.0, "loss was zero");
    Ok(())
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bb = BackboneConfig::micro();
    let data = ok(generate_synthetic(&SyntheticSpec {
        seed: 4,
        n_images: 2,
        height: 64,
        width: 64,
        n_cls: 5,
    }))?;
    let image = Tensor::from_fn(&[3, 64, 64], |_| rng.random_range(-1.0..1.0));
    for variant in [DecoderVariant::Literal, DecoderVariant::Projected] {
        let mut on = ok(SegModel::<f64>::new(bb.clone(), decoder_cfg(variant, true), 9))?;
        let mut off = ok(SegModel::<f64>::new(bb.clone(), decoder_cfg(variant, false), 9))?;
        let (a, b) = (ok(on.logits(&image))?, ok(off.logits(&image))?);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&a) == bits(&b), "{variant}: outputs differ at initialization");
        one_step(&mut on, &data)?;
        one_step(&mut off, &data)?;
        let (a2, b2) = (ok(on.logits(&image))?, ok(off.logits(&image))?);
        ensure!(
            a2.max_abs_diff(&b2) > 0.0,
            "{variant}: outputs still equal after one step"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..200 {
        let channels: Vec<usize> = (0..4).map(|_| rng.random_range(1..=96)).collect();
        let c = rng.random_range(1..=64);
        for variant in [DecoderVariant::Literal, DecoderVariant::Projected] {
            let mut on = decoder_cfg(variant, true);
            on.hidden = c;
            let off = DecoderConfig {
                zir_enabled: false,
                ..on.clone()
            };
            let conv: usize = channels
                .iter()
                .map(|&ci| match variant {
                    DecoderVariant::Literal => ci * c + ci,
                    DecoderVariant::Projected => c * ci + c,
                })
                .sum();
            let delta = count_params(&on, &channels) - count_params(&off, &channels);
            ensure!(delta == conv, "{variant} C={c} {channels:?}: delta {delta} vs {conv}");
        }
    }
    let tiny = BackboneConfig::tiny().stage_channels;
    let delta = count_params(&decoder_cfg(DecoderVariant::Literal, true), &tiny)
        - count_params(&decoder_cfg(DecoderVariant::Literal, false), &tiny);
    Ok(format!(
        "bitwise equal at init, differ after one step (both variants); ZIR delta exact on 400 configs ({delta} at C=32 on tiny widths)"
    ))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let cases = ok(run_gradient_suite(0))?;
    let secs = start.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let detail = format!(
        "{} cases, max rel err {worst:.1e} (limit {GRAD_TOLERANCE:e}), {secs:.1} s",
        cases.len()
    );
    ensure!(failed.is_empty(), "{detail}; failed {failed:?}");
    ensure!(
        cases.iter().any(|c| c.name.starts_with("end_to_end")),
        "{detail}; no end-to-end case"
    );
    ensure!(secs < 60.0, "{detail}");
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let pool = ok(rayon::ThreadPoolBuilder::new().num_threads(1).build())?;
    pool.install(|| {
        let dec = DecoderConfig {
            n_cls: 5,
            ..DecoderConfig::default()
        };
        let data = ok(generate_synthetic(&SyntheticSpec {
            seed: 0,
            n_images: 8,
            height: 64,
            width: 64,
            n_cls: 5,
        }))?;
        let cfg = TrainConfig {
            iterations: 300,
            batch_size: 8,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        };
        ensure!(cfg.optimizer.lr == 1e-4 && cfg.optimizer.weight_decay == 0.01, "unexpected optimizer defaults");
        let mut model = ok(SegModel::<f32>::new(BackboneConfig::micro(), dec, 0))?;
        let mut optim = OptimState::new(cfg.optimizer.clone(), &model.params);
        let records = ok(train_loop(&mut model, &mut optim, &data, &cfg, &Augment::default(), 0, 0, 300, |_| {}))?;
        let report = ok(evaluate(&model, &data, 255, None, ""))?;
        let acc = report.pixel_acc.unwrap_or(0.0);
        let windows: Vec<f64> = records
            .chunks(50)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect();
        let secs = start.elapsed().as_secs_f64();
        let detail = format!(
            "train pixel accuracy {:.2}% after 300 iterations, 50-iteration mean loss {:.3} -> {:.3}, {secs:.0} s on one thread",
            100.0 * acc,
            windows[0],
            windows[windows.len() - 1]
        );
        ensure!(acc >= 0.95, "{detail}");
        ensure!(windows.windows(2).all(|w| w[1] < w[0]), "{detail}; windowed loss {windows:?}");
        ensure!(secs < 300.0, "{detail}");
        Ok(detail)
    })
}

fn brute_force_iou(gt: &[u32], pred: &[u32], k: usize, ignore: u32) -> Vec<Option<f64>> {
    (0..k as u32)
        .map(|c| {
            let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
            let p: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] != ignore && pred[i] == c).collect();
            let union = g.union(&p).count();
            (union > 0).then(|| g.intersection(&p).count() as f64 / union as f64)
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ignore = 255;
    for case in 0..200 {
        let k = rng.random_range(1..=5usize);
        let gt: Vec<u32> = (0..64)
            .map(|_| {
                if rng.random_bool(0.1) {
                    ignore
                } else {
                    rng.random_range(0..k as u32)
                }
            })
            .collect();
        let pred: Vec<u32> = (0..64).map(|_| rng.random_range(0..k as u32)).collect();
        let mut cm = ConfusionMatrix::new(k, ignore);
        ok(cm.update(
            &ok(LabelMap::new(8, 8, pred.clone()))?,
            &ok(LabelMap::new(8, 8, gt.clone()))?,
        ))?;
        let want = brute_force_iou(&gt, &pred, k, ignore);
        let got = cm.per_class_iou();
        for (c, (a, b)) in got.iter().zip(&want).enumerate() {
            match (a, b) {
                (Some(a), Some(b)) => ensure!((a - b).abs() <= 1e-12, "case {case} class {c}: {a} vs {b}"),
                (None, None) => {}
                _ => return Err(format!("case {case} class {c}: presence differs {a:?} vs {b:?}")),
            }
        }
        let present: Vec<f64> = want.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        match (cm.mean_iou(), mean) {
            (Some(a), Some(b)) => ensure!((a - b).abs() <= 1e-12, "case {case}: mIoU {a} vs {b}"),
            (None, None) => {}
            (a, b) => return Err(format!("case {case}: mIoU {a:?} vs {b:?}")),
        }
    }
    let mut cm = ConfusionMatrix::new(2, ignore);
    ok(cm.update(
        &ok(LabelMap::new(2, 2, vec![0, 1, 1, 1]))?,
        &ok(LabelMap::new(2, 2, vec![0, 0, 1, 1]))?,
    ))?;
    let hand = cm.mean_iou().unwrap_or(f64::NAN);
    ensure!((hand - 7.0 / 12.0).abs() < 1e-15, "hand example gave {hand}");
    Ok(format!(
        "200 random 8x8 maps match the set oracle to 1e-12; hand example mIoU {hand:.5}"
    ))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = ok(SegModel::<f32>::new(
        BackboneConfig::micro(),
        DecoderConfig::default(),
        8,
    ))?;
    for case in 0..20 {
        let h = rng.random_range(8..=80);
        let w = rng.random_range(8..=80);
        let image = Tensor::from_fn(&[3, h, w], |_| rng.random_range(-2.0f32..2.0));
        let ss = ok(single_scale_infer(&model, &image))?;
        let ms = ok(multi_scale_infer(&model, &image, &[1.0], false))?;
        ensure!(ss == ms, "case {case} ({h}x{w}): predictions differ");
    }
    Ok("20 random inputs (8..80 px sides): scales=[1.0], no flip reproduces single-scale exactly".into())
}

fn criterion_9() -> Outcome {
    let model = ok(SegModel::<f32>::new(
        BackboneConfig::micro(),
        DecoderConfig::default(),
        0,
    ))?;
    let c = model.backbone_config().stage_channels;
    let mut sizes = vec![(64, 64), (512, 512), (512, 1024)];
    sizes.extend([(32, 32), (96, 160), (224, 64)]);
    for &(h, w) in &sizes {
        let image = Tensor::from_fn(&[3, h, w], |i| ((i % 97) as f32) / 97.0 - 0.5);
        let pyramid = ok(model.backbone.features(&model.params, &image))?;
        for (i, shape) in pyramid.shapes().iter().enumerate() {
            let s = 4 << i;
            ensure!(shape == &vec![c[i], h / s, w / s], "{h}x{w} level {}: {shape:?}", i + 1);
        }
        let logits = ok(model.logits(&image))?;
        ensure!(logits.shape() == [5, h, w], "{h}x{w}: logits {:?}", logits.shape());
    }
    let odd = Tensor::<f32>::zeros(&[3, 100, 100]);
    ensure!(model.logits(&odd).is_err(), "100x100 accepted without padding");
    Ok("strides 4/8/16/32 and 5xHxW logits at 64x64, 512x512, 512x1024, 32x32, 96x160, 224x64".into())
}

const TARGETS: [&str; 7] = ["49.39", "14.01M", "52.23", "81.75", "82.17", "42.22", "43.32"];

fn criterion_10() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let missing: Vec<&str> = TARGETS.iter().copied().filter(|t| !text.contains(t)).collect();
    ensure!(missing.is_empty(), "README lacks {missing:?}");
    Ok("full-scale targets documented in README as out of reach; claims limited to 1-9".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("paradigm equivalence", criterion_1),
        ("decay exactness", criterion_2),
        ("decomposition oracle and timing", criterion_3),
        ("zero-init identity", criterion_4),
        ("gradient suite", criterion_5),
        ("overfit sanity", criterion_6),
        ("metric oracle", criterion_7),
        ("protocol degeneracy", criterion_8),
        ("shape contract", criterion_9),
        ("documented non-reproducibility", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
