//! Cross-entropy training with AdamW, learning-rate schedules and checkpoints.

mod checkpoint;
mod optim;

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segkit_tensor::{Element, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{random_crop, random_flip, SegmentationSample};
use crate::error::{Result, SegError};
use crate::metrics::argmax;
use crate::model::SegModel;

pub use checkpoint::{config_digest, read_manifest, Checkpoint, Manifest, OptimManifest};
pub use optim::{AdamWConfig, OptimState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr * (1 - iter / iterations)^power` after warmup.
    #[default]
    Poly,
    Constant,
}

/// `[train]` configuration section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub poly_power: f64,
    pub min_lr: f64,
    /// Linear warmup length in iterations.
    pub warmup_iters: usize,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Abort with an accuracy failure when the final logged estimate is below this.
    pub accuracy_gate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Poly,
            poly_power: 1.0,
            min_lr: 0.0,
            warmup_iters: 10,
            grad_clip: None,
            accuracy_gate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(SegError::Config("batch_size must be at least 1".into()));
        }
        let nonneg = |v: f64| v >= 0.0;
        if !nonneg(self.poly_power) || !nonneg(self.min_lr) {
            return Err(SegError::Config("poly_power and min_lr must be nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(SegError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate used at iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let base = self.optimizer.lr;
        if iter < self.warmup_iters {
            return base * (iter + 1) as f64 / self.warmup_iters as f64;
        }
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Poly => {
                let frac = 1.0 - iter as f64 / self.iterations.max(1) as f64;
                self.min_lr + (base - self.min_lr) * frac.max(0.0).powf(self.poly_power)
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    /// Pixel accuracy of the batch predictions made during the forward pass.
    pub pixel_acc: f64,
}

pub const LOG_HEADER: &str = "iter,loss,lr,pixel_acc_estimate";

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.iter, self.loss, self.lr, self.pixel_acc)
    }
}

pub fn write_log(mut w: impl Write, records: &[LogRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Global L2 norm clipping.
fn clip(grads: &mut [Option<Tensor<impl Element>>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.map(|v| v * Element::lit(s));
        }
    }
}

/// Picks and augments the samples of iteration `iter`.
fn batch_for(
    data: &[SegmentationSample],
    cfg: &TrainConfig,
    aug: &Augment,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SegmentationSample>> {
    let chosen: Vec<usize> = if cfg.batch_size >= data.len() {
        (0..data.len()).collect()
    } else {
        sample(rng, data.len(), cfg.batch_size).into_vec()
    };
    chosen
        .into_iter()
        .map(|i| {
            let mut s = data[i].clone();
            if aug.flip {
                s = random_flip(&s, rng);
            }
            if let Some([h, w]) = aug.crop {
                s = random_crop(&s, h, w, aug.ignore_index, rng)?;
            }
            Ok(s)
        })
        .collect()
}

/// Augmentation settings applied to every training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub crop: Option<[usize; 2]>,
    pub ignore_index: u32,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            flip: false,
            crop: None,
            ignore_index: crate::data::DEFAULT_IGNORE_INDEX,
        }
    }
}

/// Runs iterations `start..end`. Each iteration draws its batch from a
/// generator keyed by `(seed, iteration)`, so a run split at any iteration
/// and resumed from a checkpoint reproduces the uninterrupted run.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Element>(
    model: &mut SegModel<T>,
    optim: &mut OptimState<T>,
    data: &[SegmentationSample],
    cfg: &TrainConfig,
    aug: &Augment,
    seed: u64,
    start: usize,
    end: usize,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if data.is_empty() && end > start {
        return Err(SegError::Data("training set is empty".into()));
    }
    let mut records = Vec::with_capacity(end.saturating_sub(start));
    for iter in start..end {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iter as u64);
        let batch = batch_for(data, cfg, aug, &mut rng)?;

        let tape = Tape::<T>::new();
        let p = model.params.bind(&tape, true);
        let mut losses = Vec::with_capacity(batch.len());
        let (mut correct, mut counted) = (0usize, 0usize);
        for s in &batch {
            let img = tape.constant(s.image.cast());
            let logits = model.forward(&tape, &p, img)?;
            let ce = tape.cross_entropy(logits, s.mask.labels(), aug.ignore_index)?;
            losses.push(tape.reshape(ce.loss, &[1])?);
            let pred = argmax(&tape.value(logits))?;
            for (&a, &b) in pred.labels().iter().zip(s.mask.labels()) {
                if b != aug.ignore_index {
                    counted += 1;
                    correct += (a == b) as usize;
                }
            }
        }
        let stacked = tape.concat(&losses, 0)?;
        let loss = tape.mean(stacked)?;
        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(SegError::Diverged {
                iteration: iter,
                loss: loss_value,
            });
        }
        let grads = tape.backward(loss)?;
        let mut per_param: Vec<Option<Tensor<T>>> = p.vars().iter().map(|&v| grads.get(v).cloned()).collect();
        if let Some(c) = cfg.grad_clip {
            clip(&mut per_param, c);
        }
        let lr = cfg.lr_at(iter);
        optim.step(&mut model.params, &per_param, lr)?;
        let record = LogRecord {
            iter,
            loss: loss_value,
            lr,
            pixel_acc: if counted == 0 {
                0.0
            } else {
                correct as f64 / counted as f64
            },
        };
        on_record(&record);
        records.push(record);
    }
    Ok(records)
}
