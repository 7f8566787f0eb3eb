//! Confusion matrices, IoU scores and single-/multi-scale inference.

use segkit_tensor::{kernels, Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::INPUT_MULTIPLE;
use crate::data::{LabelMap, SegmentationSample};
use crate::error::{Result, SegError};
use crate::model::Segmenter;

/// `counts[gt * n_cls + pred]`: rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_cls: usize,
    ignore_index: u32,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_cls: usize, ignore_index: u32) -> Self {
        Self {
            n_cls,
            ignore_index,
            counts: vec![0; n_cls * n_cls],
        }
    }

    pub fn n_cls(&self) -> usize {
        self.n_cls
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_cls + pred]
    }

    /// Number of pixels accumulated.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not the ignore label.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(SegError::Data(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.n_cls;
        let w = gt.width();
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if g == self.ignore_index {
                continue;
            }
            let (y, x) = (i / w, i % w);
            if p as usize >= k {
                return Err(SegError::Data(format!(
                    "predicted label {p} at pixel (y={y}, x={x}) is outside [0, {k})"
                )));
            }
            if g as usize >= k {
                return Err(SegError::Data(format!(
                    "label {g} at pixel (y={y}, x={x}) is outside [0, {k})"
                )));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_cls != self.n_cls {
            return Err(SegError::Data(format!(
                "cannot merge confusion matrices over {} and {} classes",
                self.n_cls, other.n_cls
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_k = tp / (row + col - tp)`; `None` for classes absent from both.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.n_cls;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let row: u64 = (0..k).map(|j| self.count(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.count(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over present classes; `None` when nothing was counted.
    pub fn mean_iou(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.n_cls).map(|c| self.count(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

/// Per-pixel argmax over `[k, h, w]`; ties go to the lowest class.
pub fn argmax<T: Element>(scores: &Tensor<T>) -> Result<LabelMap> {
    let s = scores.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(SegError::Config(format!("expected [k, h, w] scores, got {s:?}")));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = scores.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(h, w, labels)
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends `[c, h, w]` at the bottom/right to `[c, new_h, new_w]` by mirror reflection.
pub fn reflect_pad<T: Element>(x: &Tensor<T>, new_h: usize, new_w: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (new_h, new_w) {
        return x.clone();
    }
    let d = x.data();
    Tensor::from_fn(&[c, new_h, new_w], |j| {
        let (ch, y, xx) = (j / (new_h * new_w), (j / new_w) % new_h, j % new_w);
        d[ch * h * w + reflect(y, h) * w + reflect(xx, w)]
    })
}

/// Top-left `[c, h, w]` window of `x`.
pub fn crop_top_left<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    if (sh, sw) == (h, w) {
        return x.clone();
    }
    let d = x.data();
    Tensor::from_fn(&[c, h, w], |j| {
        let (ch, y, xx) = (j / (h * w), (j / w) % h, j % w);
        d[ch * sh * sw + y * sw + xx]
    })
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Class probabilities `[k, h, w]` for an arbitrary-size image: reflection
/// padded to a multiple of 32, run, cropped back, softmaxed over classes.
pub fn predict_probs<T: Element>(model: &impl Segmenter<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(SegError::Config(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let padded = reflect_pad(image, round_up(h, INPUT_MULTIPLE), round_up(w, INPUT_MULTIPLE));
    let logits = model.logits(&padded)?;
    let logits = crop_top_left(&logits, h, w);
    Ok(kernels::softmax(&logits, 0)?)
}

pub fn single_scale_infer<T: Element>(model: &impl Segmenter<T>, image: &Tensor<T>) -> Result<LabelMap> {
    argmax(&predict_probs(model, image)?)
}

pub const DEFAULT_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

/// Multi-scale protocol settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for MsConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            flip: true,
        }
    }
}

/// Averages softmax probabilities over rescaled (and optionally mirrored)
/// copies of the image at the original resolution, then takes the argmax.
pub fn multi_scale_infer<T: Element>(
    model: &impl Segmenter<T>,
    image: &Tensor<T>,
    scales: &[f64],
    flip: bool,
) -> Result<LabelMap> {
    if scales.is_empty() {
        return Err(SegError::Config(
            "multi-scale inference needs at least one scale".into(),
        ));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(SegError::Config(format!("invalid inference scale {s}")));
    }
    let mut sorted = scales.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut acc: Option<Vec<T>> = None;
    let mut views = 0usize;
    for &scale in &sorted {
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let scaled = kernels::bilinear_resize(image, sh, sw)?;
        let mut inputs = vec![(scaled.clone(), false)];
        if flip {
            inputs.push((kernels::flip_last(&scaled), true));
        }
        for (input, flipped) in inputs {
            let mut probs = predict_probs(model, &input)?;
            if flipped {
                probs = kernels::flip_last(&probs);
            }
            let probs = kernels::bilinear_resize(&probs, h, w)?;
            match acc.as_mut() {
                None => acc = Some(probs.into_vec()),
                Some(a) => a.iter_mut().zip(probs.data()).for_each(|(a, &p)| *a += p),
            }
            views += 1;
        }
    }
    let mut mean = acc.expect("at least one view");
    if views > 1 {
        let n = T::lit(views as f64);
        mean.iter_mut().for_each(|v| *v /= n);
    }
    argmax(&Tensor::from_vec_unchecked(&[model.n_classes(), h, w], mean)?)
}

/// Evaluation summary written as `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-class IoU under the reported protocol; `null` for absent classes.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_ss: Option<f64>,
    pub miou_ms: Option<f64>,
    pub pixel_acc: Option<f64>,
    pub n_images: usize,
    pub config_digest: String,
}

/// Scores `samples` with single-scale inference and, when `ms` is given,
/// multi-scale inference too. Per-class IoU and pixel accuracy come from
/// the multi-scale run when present.
pub fn evaluate<T: Element>(
    model: &impl Segmenter<T>,
    samples: &[SegmentationSample],
    ignore_index: u32,
    ms: Option<&MsConfig>,
    config_digest: &str,
) -> Result<EvalReport> {
    let k = model.n_classes();
    let mut ss_cm = ConfusionMatrix::new(k, ignore_index);
    let mut ms_cm = ConfusionMatrix::new(k, ignore_index);
    for s in samples {
        let image: Tensor<T> = s.image.cast();
        ss_cm.update(&single_scale_infer(model, &image)?, &s.mask)?;
        if let Some(m) = ms {
            ms_cm.update(&multi_scale_infer(model, &image, &m.scales, m.flip)?, &s.mask)?;
        }
    }
    let primary = if ms.is_some() { &ms_cm } else { &ss_cm };
    Ok(EvalReport {
        per_class_iou: primary.per_class_iou(),
        miou_ss: ss_cm.mean_iou(),
        miou_ms: ms.and_then(|_| ms_cm.mean_iou()),
        pixel_acc: primary.pixel_accuracy(),
        n_images: samples.len(),
        config_digest: config_digest.to_string(),
    })
}
