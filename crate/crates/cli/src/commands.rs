//! Subcommand implementations.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use segkit::backbone::BackboneConfig;
use segkit::bench::{self, BenchRecord};
use segkit::data::{generate_synthetic, save_mask, write_folder, SyntheticSpec};
use segkit::decoder::count_params;
use segkit::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use segkit::metrics::{evaluate, multi_scale_infer, single_scale_infer, MsConfig};
use segkit::model::SegModel;
use segkit::trainer::{read_manifest, train_loop, Augment, Checkpoint, OptimState, LOG_HEADER};
use segkit::{Result, SegError};
use segkit_tensor::{DType, Element, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{ArchArgs, BenchKind, Cli, CliError, Command};

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SegError + '_ {
    move |source| SegError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn apply_arch(cfg: &mut RunConfig, arch: &ArchArgs) -> Result<()> {
    if let Some(name) = &arch.preset {
        cfg.backbone = BackboneConfig::preset(name)?;
    }
    if let Some(v) = arch.decoder_variant {
        cfg.decoder.variant = v;
    }
    if arch.no_zir {
        cfg.decoder.zir_enabled = false;
    }
    if let Some(c) = arch.decoder_c {
        cfg.decoder.hidden = c;
    }
    if let Some(k) = arch.n_cls {
        cfg.decoder.n_cls = k;
    }
    Ok(())
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let from_file = cli.config.is_some();
    match cli.command {
        Command::Train {
            iters,
            stop_at,
            dtype,
            resume,
            arch,
        } => {
            apply_arch(&mut cfg, &arch)?;
            if let Some(n) = iters {
                cfg.train.iterations = n;
            }
            if let Some(d) = dtype {
                cfg.dtype = d.into();
            }
            finish(&cfg)?;
            let summary = match cfg.dtype {
                DType::F32 => train::<f32>(&cfg, resume.as_deref(), stop_at)?,
                DType::F64 => train::<f64>(&cfg, resume.as_deref(), stop_at)?,
            };
            write_json(&cfg.output_dir.join("train.json"), &summary)?;
            if let (Some(gate), Some(reached)) = (cfg.train.accuracy_gate, summary.final_pixel_acc) {
                if reached < gate {
                    return Err(CliError::AccuracyGate { reached, gate });
                }
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            ms,
            scales,
            no_flip,
            dump_mask,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_NAME));
            let manifest = read_manifest(&ckpt)?;
            if !from_file {
                cfg.backbone = manifest.backbone.clone();
                cfg.decoder = manifest.decoder.clone();
            }
            cfg.dtype = manifest.dtype;
            if let Some(s) = scales {
                cfg.eval.scales = s;
                cfg.eval.ms = true;
            }
            cfg.eval.ms |= ms;
            cfg.eval.flip &= !no_flip;
            finish(&cfg)?;
            match cfg.dtype {
                DType::F32 => eval::<f32>(&cfg, &ckpt, dump_mask.as_deref())?,
                DType::F64 => eval::<f64>(&cfg, &ckpt, dump_mask.as_deref())?,
            }
            Ok(())
        }
        Command::Bench {
            kind,
            sizes,
            lengths,
            trials,
        } => {
            if let Some(s) = sizes {
                cfg.bench.sizes = s;
            }
            if let Some(l) = lengths {
                cfg.bench.lengths = l;
            }
            if let Some(t) = trials {
                cfg.bench.settings.trials = t;
            }
            if let Some(seed) = cli.seed {
                cfg.bench.settings.seed = seed;
            }
            finish(&cfg)?;
            run_bench(&cfg, kind)?;
            Ok(())
        }
        Command::Gradcheck { dtype } => {
            if DType::from(dtype) != DType::F64 {
                return Err(SegError::Config(
                    "gradient checks need f64; finite differences in f32 are too coarse".into(),
                )
                .into());
            }
            finish(&cfg)?;
            gradcheck(&cfg)
        }
        Command::Params { decoder_only, arch } => {
            apply_arch(&mut cfg, &arch)?;
            finish(&cfg)?;
            params(&cfg, decoder_only)?;
            Ok(())
        }
        Command::Synth { n, size, n_cls } => {
            if let Some(seed) = cli.seed {
                cfg.data.seed = seed;
            }
            if let Some(n) = n {
                cfg.data.n_images = n;
            }
            if let Some(s) = size {
                cfg.data.size = s;
            }
            if let Some(k) = n_cls {
                cfg.decoder.n_cls = k;
            }
            finish(&cfg)?;
            synth(&cfg)?;
            Ok(())
        }
    }
}

/// Validates the final configuration and records it.
fn finish(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let path = cfg.write_resolved()?;
    log::info!("resolved configuration written to {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    start_iteration: usize,
    end_iteration: usize,
    final_loss: Option<f64>,
    final_pixel_acc: Option<f64>,
    params: usize,
    config_digest: String,
}

fn train<T: Element>(cfg: &RunConfig, resume: Option<&Path>, stop_at: Option<usize>) -> Result<TrainSummary> {
    let data = cfg.data.model_inputs(&cfg.data.load(cfg.decoder.n_cls)?);
    let (mut model, mut optim, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            ck.verify(&cfg.backbone, &cfg.decoder)?;
            if ck.manifest.seed != cfg.seed {
                log::warn!(
                    "resuming a run seeded with {} under seed {}; batches will differ",
                    ck.manifest.seed,
                    cfg.seed
                );
            }
            let model = ck.to_model()?;
            let optim = match ck.optim {
                Some(o) => o,
                None => OptimState::new(cfg.train.optimizer.clone(), &model.params),
            };
            (model, optim, ck.manifest.iteration)
        }
        None => {
            let model = SegModel::<T>::new(cfg.backbone.clone(), cfg.decoder.clone(), cfg.seed)?;
            let optim = OptimState::new(cfg.train.optimizer.clone(), &model.params);
            (model, optim, 0)
        }
    };
    let end = stop_at.map_or(cfg.train.iterations, |s| s.min(cfg.train.iterations));
    if start > end {
        return Err(SegError::Config(format!(
            "checkpoint is at iteration {start}, past the requested stop at {end}"
        )));
    }

    let log_path = cfg.output_dir.join("loss.csv");
    let append = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
    }
    let aug = Augment {
        flip: cfg.data.flip,
        crop: cfg.data.crop,
        ignore_index: cfg.data.ignore_index,
    };
    let mut write_failed = None;
    let result = train_loop(
        &mut model,
        &mut optim,
        &data,
        &cfg.train,
        &aug,
        cfg.seed,
        start,
        end,
        |r| {
            if let Err(e) = writeln!(log, "{}", r.csv_row()) {
                write_failed.get_or_insert(e);
            }
            if r.iter % 10 == 0 || r.iter + 1 == end {
                log::info!(
                    "iter {:>5}  loss {:.5}  lr {:.3e}  acc {:.4}",
                    r.iter,
                    r.loss,
                    r.lr,
                    r.pixel_acc
                );
            }
        },
    );
    log.flush().map_err(io_err(&log_path))?;
    if let Some(e) = write_failed {
        return Err(io_err(&log_path)(e));
    }
    let records = result?;

    let ck_path = cfg.output_dir.join(CHECKPOINT_NAME);
    let ck = Checkpoint::capture(&model, Some(&optim), end, cfg.seed);
    ck.save(&ck_path)?;
    log::info!("checkpoint written to {}", ck_path.display());
    Ok(TrainSummary {
        start_iteration: start,
        end_iteration: end,
        final_loss: records.last().map(|r| r.loss),
        final_pixel_acc: records.last().map(|r| r.pixel_acc),
        params: model.params.numel(),
        config_digest: ck.manifest.config_digest,
    })
}

fn eval<T: Element>(cfg: &RunConfig, ckpt: &Path, dump: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::<T>::load(ckpt)?;
    ck.verify(&cfg.backbone, &cfg.decoder)?;
    let model = ck.to_model()?;
    let data = cfg.data.model_inputs(&cfg.data.load(cfg.decoder.n_cls)?);
    let ms = cfg.eval.ms_config();
    let report = evaluate(
        &model,
        &data,
        cfg.data.ignore_index,
        ms.as_ref(),
        &ck.manifest.config_digest,
    )?;
    let path = cfg.output_dir.join("eval.json");
    write_json(&path, &report)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    println!("images      {}", report.n_images);
    println!("mIoU (SS)   {}", show(report.miou_ss));
    if ms.is_some() {
        println!("mIoU (MS)   {}", show(report.miou_ms));
    }
    println!("pixel acc   {}", show(report.pixel_acc));
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, s) in data.iter().enumerate() {
            let pred = predict(&model, &s.image.cast(), ms.as_ref())?;
            save_mask(&pred, &dir.join(format!("{i:04}.png")), cfg.data.ignore_index)?;
        }
        log::info!("{} predicted masks written to {}", data.len(), dir.display());
    }
    Ok(())
}

fn predict<T: Element>(
    model: &SegModel<T>,
    image: &Tensor<T>,
    ms: Option<&MsConfig>,
) -> Result<segkit::data::LabelMap> {
    match ms {
        Some(m) => multi_scale_infer(model, image, &m.scales, m.flip),
        None => single_scale_infer(model, image),
    }
}

fn write_records(dir: &Path, records: &[BenchRecord]) -> Result<()> {
    let csv = dir.join("bench.csv");
    let f = File::create(&csv).map_err(io_err(&csv))?;
    bench::write_csv(BufWriter::new(f), records).map_err(io_err(&csv))?;
    let dat = dir.join("bench.dat");
    let f = File::create(&dat).map_err(io_err(&dat))?;
    bench::write_gnuplot(BufWriter::new(f), records).map_err(io_err(&dat))?;
    Ok(())
}

fn run_bench(cfg: &RunConfig, kind: BenchKind) -> Result<()> {
    let settings = &cfg.bench.settings;
    let mut records = Vec::new();
    if kind != BenchKind::Paradigm {
        let sizes: Vec<(usize, usize)> = cfg.bench.sizes.iter().map(|&s| (s, s)).collect();
        let sweep = bench::run_attention_sweep(&sizes, settings)?;
        for note in &sweep.skipped {
            println!("skipped {note}");
        }
        records.extend(sweep.records);
    }
    if kind != BenchKind::Attention {
        let sweep = bench::run_paradigm_sweep(&cfg.bench.lengths, settings)?;
        records.extend(sweep.records);
    }
    println!(
        "{:<22} {:>5} {:>5} {:>14} {:>12}",
        "kernel", "H", "W", "median (ns)", "GFLOP/s"
    );
    for r in &records {
        let gflops = r.flops_est / r.ns_median.max(1) as f64;
        println!(
            "{:<22} {:>5} {:>5} {:>14} {:>12.3}",
            r.kernel, r.h, r.w, r.ns_median, gflops
        );
    }
    for (h, ratio) in bench::speedup_ratios(&records) {
        println!(
            "full/decomposed at H={h}: measured {ratio:.2}, analytic {:.1}",
            h as f64 / 2.0
        );
    }
    write_records(&cfg.output_dir, &records)
}

fn gradcheck(cfg: &RunConfig) -> std::result::Result<(), CliError> {
    let cases = run_gradient_suite(cfg.seed)?;
    let path = cfg.output_dir.join("gradcheck.csv");
    let mut csv = String::from("case,rel_error,pass\n");
    println!("{:<32} {:>12}  result", "case", "rel error");
    for c in &cases {
        println!(
            "{:<32} {:>12.3e}  {}",
            c.name,
            c.rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{:e},{}\n", c.name, c.rel_error, c.passed()));
    }
    fs::write(&path, csv).map_err(io_err(&path))?;
    let failed = cases.iter().filter(|c| !c.passed()).count();
    println!("{} cases, {failed} above {GRAD_TOLERANCE:e}", cases.len());
    if failed > 0 {
        return Err(CliError::GradientCheck(failed));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ParamReport {
    preset_channels: [usize; 4],
    backbone: Option<usize>,
    decoder: usize,
    total: Option<usize>,
}

fn params(cfg: &RunConfig, decoder_only: bool) -> Result<()> {
    let channels = cfg.backbone.stage_channels;
    let decoder = count_params(&cfg.decoder, &channels);
    let backbone = cfg.backbone.param_count();
    let report = ParamReport {
        preset_channels: channels,
        backbone: (!decoder_only).then_some(backbone),
        decoder,
        total: (!decoder_only).then_some(backbone + decoder),
    };
    if decoder_only {
        println!("decoder   {decoder}");
    } else {
        println!("backbone  {backbone}");
        println!("decoder   {decoder}");
        println!("total     {}", backbone + decoder);
    }
    write_json(&cfg.output_dir.join("params.json"), &report)
}

fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = SyntheticSpec {
        seed: cfg.data.seed,
        n_images: cfg.data.n_images,
        height: cfg.data.size,
        width: cfg.data.size,
        n_cls: cfg.decoder.n_cls,
    };
    let samples = generate_synthetic(&spec)?;
    write_folder(&samples, &cfg.output_dir, cfg.decoder.n_cls, cfg.data.ignore_index)?;
    println!("{} images written to {}", samples.len(), cfg.output_dir.display());
    Ok(cfg.output_dir.clone())
}
