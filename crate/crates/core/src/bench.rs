//! Wall-clock sweeps of the attention operators and retention paradigms.
//! Every sweep checks numerical agreement of the kernels before timing them.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit_tensor::{Element, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::retention::{
    axial_decay_tensors, full_decay_tensor, masa_core, resa_core, RetentionConfig, RetentionParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kernel: String,
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    /// Median wall time over `trials` runs, warmup excluded.
    pub ns_median: u64,
    pub flops_est: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub trials: usize,
    /// Untimed calls before measuring; at least one always runs.
    pub warmup: usize,
    pub seed: u64,
    /// Head width of the timed operators.
    pub d_k: usize,
    pub heads: usize,
    /// Sizes whose largest intermediate set exceeds this are skipped.
    pub memory_budget_bytes: usize,
    /// Short kernels are repeated until one trial takes at least this long.
    pub min_trial_ns: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            trials: 5,
            warmup: 1,
            seed: 0,
            d_k: 16,
            heads: 1,
            memory_budget_bytes: 2 << 30,
            min_trial_ns: 20_000_000,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 5 {
            return Err(SegError::Config(format!(
                "benchmarks need at least 5 trials, got {}",
                self.trials
            )));
        }
        Ok(())
    }
}

/// Records plus notes about sizes that were not run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sweep {
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<String>,
}

pub fn full_attention_flops(h: usize, w: usize, d: usize, heads: usize) -> f64 {
    let n = (h * w) as f64;
    4.0 * n * n * d as f64 * heads as f64
}

pub fn decomposed_attention_flops(h: usize, w: usize, d: usize, heads: usize) -> f64 {
    4.0 * (h * w) as f64 * (h + w) as f64 * d as f64 * heads as f64
}

pub fn parallel_flops(n: usize, d: usize, heads: usize) -> f64 {
    4.0 * (n * n * d * heads) as f64
}

pub fn recurrent_flops(n: usize, d: usize, heads: usize) -> f64 {
    4.0 * (n * d * d * heads) as f64
}

pub fn chunkwise_flops(n: usize, chunk: usize, d: usize, heads: usize) -> f64 {
    (4 * n * chunk * d + 6 * n * d * d) as f64 * heads as f64
}

/// Per-call median. Short kernels are repeated inside each trial so that a
/// trial lasts at least `min_trial_ns`.
fn median_ns(settings: &BenchSettings, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    let t0 = Instant::now();
    f()?;
    let once = t0.elapsed().as_nanos().max(1) as u64;
    for _ in 1..settings.warmup {
        f()?;
    }
    let reps = settings.min_trial_ns.div_ceil(once).max(1);
    let mut times = Vec::with_capacity(settings.trials);
    for _ in 0..settings.trials {
        let t0 = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        times.push(t0.elapsed().as_nanos() as u64 / reps);
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

/// Runs `f` on a dedicated single-thread pool.
fn pinned<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| SegError::Config(format!("cannot build benchmark thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn random_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

fn params<T: Element>(settings: &BenchSettings, seed: u64) -> Result<RetentionParams<T>> {
    let cfg = RetentionConfig::new(settings.heads, settings.d_k)?;
    let d_model = cfg.inner_dim();
    RetentionParams::random(cfg, d_model, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gate(kernel: &str, diff: f64, tol: f64) -> Result<()> {
    if diff.is_finite() && diff < tol {
        Ok(())
    } else {
        Err(SegError::BenchGate {
            kernel: kernel.to_string(),
            diff,
        })
    }
}

/// Times full and decomposed 2D attention on each `(h, w)` size. Before any
/// timing the two operators must agree on `1 x w` and `h x 1` strips (f64).
pub fn run_attention_sweep(sizes: &[(usize, usize)], settings: &BenchSettings) -> Result<Sweep> {
    settings.validate()?;
    let check = params::<f64>(settings, settings.seed)?;
    let d_model = check.d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed);
    for &(h, w) in sizes {
        for (sh, sw) in [(1, w), (h, 1)] {
            let x = random_tensor::<f64>(&mut rng, &[sh * sw, d_model]);
            let full = check.masa_full(&x, sh, sw)?;
            let dec = check.resa_decomposed(&x, sh, sw)?;
            gate("masa_full/resa_decomposed", full.max_abs_diff(&dec), 1e-10)?;
        }
    }

    let p = params::<f32>(settings, settings.seed)?;
    let mut sweep = Sweep::default();
    for &(h, w) in sizes {
        let n = h * w;
        // the fused kernel keeps no n x n buffer besides the mask (f64 build, f32 copy)
        let bytes = settings.heads * n * n * (8 + 4);
        if bytes > settings.memory_budget_bytes {
            let note = format!("{h}x{w}: full attention needs ~{} MiB, over budget", bytes >> 20);
            log::warn!("{note}");
            sweep.skipped.push(note);
            continue;
        }
        // projections and masks are shared setup; only the attention cores are timed
        let x = random_tensor::<f32>(&mut rng, &[n, d_model]);
        let qkv = p.grid_qkv(&x, h, w)?;
        let d_full = full_decay_tensor::<f32>(&p.config, h, w)?;
        let (dh, dw) = axial_decay_tensors::<f32>(&p.config, h, w)?;
        let bind = |tape: &Tape<f32>| {
            let [q, k, v] = qkv.clone().map(|t| tape.constant(t));
            (q, k, v)
        };
        let full = pinned(|| {
            median_ns(settings, || {
                let tape = Tape::new();
                let d = tape.constant(d_full.clone());
                masa_core(&tape, bind(&tape), d, &p.config).map(drop)
            })
        })??;
        let dec = pinned(|| {
            median_ns(settings, || {
                let tape = Tape::new();
                let masks = (tape.constant(dh.clone()), tape.constant(dw.clone()));
                resa_core(&tape, bind(&tape), masks, &p.config, h, w).map(drop)
            })
        })??;
        let (d, heads) = (settings.d_k, settings.heads);
        let rec = |kernel: &str, ns, flops| BenchRecord {
            kernel: kernel.into(),
            h,
            w,
            n,
            d,
            heads,
            ns_median: ns,
            flops_est: flops,
            trials: settings.trials,
        };
        sweep
            .records
            .push(rec("masa_full", full, full_attention_flops(h, w, d, heads)));
        sweep
            .records
            .push(rec("resa_decomposed", dec, decomposed_attention_flops(h, w, d, heads)));
    }
    Ok(sweep)
}

/// Times the parallel, recurrent and chunkwise (`chunk = sqrt(n)`) paradigms
/// after checking they agree in f64.
pub fn run_paradigm_sweep(ns: &[usize], settings: &BenchSettings) -> Result<Sweep> {
    settings.validate()?;
    let check = params::<f64>(settings, settings.seed)?;
    let p = params::<f32>(settings, settings.seed)?;
    let d_model = check.d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0xc4a1);
    let mut sweep = Sweep::default();
    for &n in ns {
        let chunk = ((n as f64).sqrt().round() as usize).max(1);
        let x64 = random_tensor::<f64>(&mut rng, &[n, d_model]);
        let masks = check.config.causal_masks(n)?;
        let par = check.parallel(&x64, &masks)?;
        let scale = par.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        gate(
            "retention_recurrent",
            par.max_abs_diff(&check.recurrent(&x64)?),
            1e-10 * scale,
        )?;
        gate(
            "retention_chunkwise",
            par.max_abs_diff(&check.chunkwise(&x64, chunk)?),
            1e-10 * scale,
        )?;

        let x: Tensor<f32> = x64.cast();
        let masks = p.config.causal_masks(n)?;
        let t_par = pinned(|| median_ns(settings, || p.parallel(&x, &masks).map(drop)))??;
        let t_rec = pinned(|| median_ns(settings, || p.recurrent(&x).map(drop)))??;
        let t_chunk = pinned(|| median_ns(settings, || p.chunkwise(&x, chunk).map(drop)))??;
        let (d, heads) = (settings.d_k, settings.heads);
        for (kernel, ns_median, flops) in [
            ("retention_parallel", t_par, parallel_flops(n, d, heads)),
            ("retention_recurrent", t_rec, recurrent_flops(n, d, heads)),
            ("retention_chunkwise", t_chunk, chunkwise_flops(n, chunk, d, heads)),
        ] {
            sweep.records.push(BenchRecord {
                kernel: kernel.into(),
                h: 1,
                w: n,
                n,
                d,
                heads,
                ns_median,
                flops_est: flops,
                trials: settings.trials,
            });
        }
    }
    Ok(sweep)
}

pub const CSV_HEADER: &str = "kernel,H,W,N,d,heads,ns_median,flops_est";

pub fn write_csv(mut w: impl Write, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.kernel, r.h, r.w, r.n, r.d, r.heads, r.ns_median, r.flops_est
        )?;
    }
    Ok(())
}

/// Whitespace-separated columns with one `#` header line, one block per kernel.
pub fn write_gnuplot(mut w: impl Write, records: &[BenchRecord]) -> std::io::Result<()> {
    let mut kernels: Vec<&str> = records.iter().map(|r| r.kernel.as_str()).collect();
    kernels.dedup();
    writeln!(w, "# kernel H W N d heads ns_median flops_est")?;
    for (i, k) in kernels.iter().enumerate() {
        if i > 0 {
            writeln!(w, "\n")?;
        }
        for r in records.iter().filter(|r| r.kernel == *k) {
            writeln!(
                w,
                "{} {} {} {} {} {} {} {}",
                r.kernel, r.h, r.w, r.n, r.d, r.heads, r.ns_median, r.flops_est
            )?;
        }
    }
    Ok(())
}

/// `(full / decomposed)` median-time ratio per square size, in sweep order.
pub fn speedup_ratios(records: &[BenchRecord]) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.kernel == "masa_full")
        .filter_map(|f| {
            records
                .iter()
                .find(|d| d.kernel == "resa_decomposed" && d.h == f.h && d.w == f.w)
                .map(|d| (f.h, f.ns_median as f64 / d.ns_median.max(1) as f64))
        })
        .collect()
}
