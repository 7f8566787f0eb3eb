//! Samples, the synthetic shape generator, PNG folder ingestion and
//! flip/crop augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segkit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, SegError};

pub const DEFAULT_IGNORE_INDEX: u32 = 255;
/// Mask value on disk that maps to the in-memory ignore label.
const DISK_IGNORE: u8 = 255;

/// Row-major `h x w` grid of class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(SegError::Data(format!(
                "label map of {h}x{w} needs {} labels, got {}",
                h * w,
                labels.len()
            )));
        }
        Ok(Self { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: u32) -> Self {
        Self {
            h,
            w,
            labels: vec![label; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.w.max(1)) {
            labels.extend(row.iter().rev());
        }
        Self { labels, ..*self }
    }

    fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut labels = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.w + x0..y * self.w + x0 + w]);
        }
        Self { h, w, labels }
    }

    fn pad(&self, h: usize, w: usize, fill: u32) -> Self {
        let mut labels = vec![fill; h * w];
        for y in 0..self.h {
            labels[y * w..y * w + self.w].copy_from_slice(&self.labels[y * self.w..(y + 1) * self.w]);
        }
        Self { h, w, labels }
    }
}

/// An RGB image `[3, H, W]` with values in `[0, 1]` and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: Tensor<f32>,
    pub mask: LabelMap,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f32>, mask: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != mask.h || s[2] != mask.w {
            return Err(SegError::Data(format!(
                "image shape {s:?} does not match mask {}x{}",
                mask.h, mask.w
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.h
    }

    pub fn width(&self) -> usize {
        self.mask.w
    }

    /// Every label is below `n_cls` or equal to `ignore_index`.
    pub fn check_labels(&self, n_cls: usize, ignore_index: u32) -> Result<()> {
        for (i, &l) in self.mask.labels.iter().enumerate() {
            if l != ignore_index && l as usize >= n_cls {
                return Err(SegError::Data(format!(
                    "label {l} at pixel (y={}, x={}) is outside [0, {n_cls})",
                    i / self.mask.w,
                    i % self.mask.w
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Folder,
}

/// `[data]` configuration section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic generator seed.
    pub seed: u64,
    pub n_images: usize,
    /// Synthetic image side length.
    pub size: usize,
    pub images_dir: Option<PathBuf>,
    pub masks_dir: Option<PathBuf>,
    pub ignore_index: u32,
    /// Training crop `[h, w]`; none trains on full images.
    pub crop: Option<[usize; 2]>,
    /// Random horizontal flips during training.
    pub flip: bool,
    /// Per-channel input normalization `(x - mean) / std`, applied to network inputs only.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            seed: 0,
            n_images: 8,
            size: 64,
            images_dir: None,
            masks_dir: None,
            ignore_index: DEFAULT_IGNORE_INDEX,
            crop: None,
            flip: false,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl DataConfig {
    /// Builds the dataset described by this section.
    pub fn load(&self, n_cls: usize) -> Result<Vec<SegmentationSample>> {
        let samples = match self.source {
            DataSource::Synthetic => generate_synthetic(&SyntheticSpec {
                seed: self.seed,
                n_images: self.n_images,
                height: self.size,
                width: self.size,
                n_cls,
            })?,
            DataSource::Folder => {
                let (Some(images), Some(masks)) = (&self.images_dir, &self.masks_dir) else {
                    return Err(SegError::Config(
                        "folder data source needs images_dir and masks_dir".into(),
                    ));
                };
                load_folder(images, masks, self.ignore_index)?
            }
        };
        for s in &samples {
            s.check_labels(n_cls, self.ignore_index)?;
        }
        Ok(samples)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(SegError::Config(format!("data.std entries must be positive, got {s}")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(SegError::Config(format!(
                "data.mean must be finite, got {:?}",
                self.mean
            )));
        }
        Ok(())
    }

    /// Copies of `samples` with normalized images, as fed to the network.
    /// The identity setting returns the samples unchanged.
    pub fn model_inputs(&self, samples: &[SegmentationSample]) -> Vec<SegmentationSample> {
        if self.mean == [0.0; 3] && self.std == [1.0; 3] {
            return samples.to_vec();
        }
        samples
            .iter()
            .map(|s| {
                let plane = s.height() * s.width();
                let data = s.image.data();
                let image = Tensor::from_fn(s.image.shape(), |i| {
                    let c = i / plane;
                    (data[i] - self.mean[c]) / self.std[c]
                });
                SegmentationSample {
                    image,
                    mask: s.mask.clone(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub n_cls: usize,
}

/// Saturated, evenly spaced hues for classes `1..n_cls`.
fn class_color(class: usize, n_cls: usize) -> [u8; 3] {
    let hue = 6.0 * (class - 1) as f64 / (n_cls - 1) as f64;
    let f = hue - hue.floor();
    let (up, down) = ((255.0 * f).round() as u8, (255.0 * (1.0 - f)).round() as u8);
    match hue.floor() as usize % 6 {
        0 => [255, up, 0],
        1 => [down, 255, 0],
        2 => [0, 255, up],
        3 => [0, down, 255],
        4 => [up, 0, 255],
        _ => [255, 0, down],
    }
}

enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Ellipse { cy: i64, cx: i64, ry: i64, rx: i64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        if rng.random_bool(0.5) {
            // 4-pixel aligned rectangles up to half the image side
            let rh = 4 * rng.random_range(3..=(h / 8).max(3));
            let rw = 4 * rng.random_range(3..=(w / 8).max(3));
            let (rh, rw) = (rh.min(h), rw.min(w));
            let y0 = 4 * rng.random_range(0..=(h - rh) / 4);
            let x0 = 4 * rng.random_range(0..=(w - rw) / 4);
            Shape::Rect { y0, x0, h: rh, w: rw }
        } else {
            let ry = rng.random_range(6..=(h as i64 / 4).max(6));
            let rx = rng.random_range(6..=(w as i64 / 4).max(6));
            let cy = rng.random_range(0..h as i64);
            let cx = rng.random_range(0..w as i64);
            Shape::Ellipse { cy, cx, ry, rx }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = (y as i64 - cy, x as i64 - cx);
                dy * dy * rx * rx + dx * dx * ry * ry <= rx * rx * ry * ry
            }
        }
    }
}

/// Colored rectangles and ellipses on a dark textured background.
/// Background is class 0; image `i` always ends with a shape of class
/// `1 + i mod (n_cls - 1)`, drawn on top, so `n_cls - 1` images cover every class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SegmentationSample>> {
    let SyntheticSpec {
        seed,
        n_images,
        height: h,
        width: w,
        n_cls,
    } = *spec;
    if n_cls < 2 {
        return Err(SegError::Data(format!("need at least 2 classes, got {n_cls}")));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(SegError::Data(format!(
            "synthetic image size {h}x{w} must be a positive multiple of 32"
        )));
    }
    if n_images > 0 && n_images < n_cls - 1 {
        log::warn!("{n_images} synthetic images cannot show all {n_cls} classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rgb = vec![0u8; 3 * h * w];
        for (p, px) in rgb.chunks_exact_mut(3).enumerate() {
            let base = if ((p / w) / 8 + (p % w) / 8) % 2 == 0 { 24 } else { 40 };
            for c in px.iter_mut() {
                *c = base + rng.random_range(0..24u8);
            }
        }
        let mut labels = vec![0u32; h * w];
        let extra = rng.random_range(1..=3usize);
        let mut classes: Vec<usize> = (0..extra).map(|_| rng.random_range(1..n_cls)).collect();
        classes.push(1 + i % (n_cls - 1));
        for class in classes {
            let shape = Shape::random(&mut rng, h, w);
            let color = class_color(class, n_cls);
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y, x) {
                        let p = y * w + x;
                        labels[p] = class as u32;
                        for c in 0..3 {
                            let jitter = rng.random_range(0..=32u8);
                            rgb[3 * p + c] = if color[c] >= 128 {
                                color[c] - jitter
                            } else {
                                color[c] + jitter
                            };
                        }
                    }
                }
            }
        }
        let image = Tensor::from_fn(&[3, h, w], |j| {
            let (c, p) = (j / (h * w), j % (h * w));
            rgb[3 * p + c] as f32 / 255.0
        });
        out.push(SegmentationSample::new(image, LabelMap::new(h, w, labels)?)?);
    }
    Ok(out)
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| SegError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads one image/mask pair. Mask value 255 becomes `ignore_index`.
pub fn load_pair(image_path: &Path, mask_path: &Path, ignore_index: u32) -> Result<SegmentationSample> {
    let img = read_image(image_path)?.to_rgb8();
    let mask = read_image(mask_path)?;
    if mask.color() != ColorType::L8 {
        return Err(SegError::Data(format!(
            "{}: mask must be a single-channel 8-bit PNG, found {:?}",
            mask_path.display(),
            mask.color()
        )));
    }
    let mask = mask.to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(SegError::Data(format!(
            "{} is {:?} but its mask is {:?}",
            image_path.display(),
            img.dimensions(),
            mask.dimensions()
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let image = Tensor::from_fn(&[3, h, w], |j| {
        let (c, p) = (j / (h * w), j % (h * w));
        raw[3 * p + c] as f32 / 255.0
    });
    let labels = mask
        .as_raw()
        .iter()
        .map(|&v| if v == DISK_IGNORE { ignore_index } else { v as u32 })
        .collect();
    SegmentationSample::new(image, LabelMap::new(h, w, labels)?)
}

/// Pairs `images_dir/<name>.png` with `masks_dir/<name>.png`, sorted by name.
pub fn load_folder(images_dir: &Path, masks_dir: &Path, ignore_index: u32) -> Result<Vec<SegmentationSample>> {
    let names = png_names(images_dir)?;
    if names.is_empty() {
        log::warn!("no PNG images found in {}", images_dir.display());
    }
    names
        .iter()
        .map(|name| {
            let mask = masks_dir.join(name);
            if !mask.exists() {
                return Err(SegError::Data(format!(
                    "image {name} has no mask at {}",
                    mask.display()
                )));
            }
            load_pair(&images_dir.join(name), &mask, ignore_index)
        })
        .collect()
}

/// Optional dataset description stored next to a folder dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_cls: usize,
    pub ignore_index: u32,
    /// `(image, mask)` paths relative to the manifest's directory.
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<SegmentationSample>)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| SegError::Data(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .pairs
        .iter()
        .map(|(i, m)| load_pair(&root.join(i), &root.join(m), manifest.ignore_index))
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        s.check_labels(manifest.n_cls, manifest.ignore_index)?;
    }
    Ok((manifest, samples))
}

/// Writes a label map as an 8-bit grayscale PNG, `ignore_index` as 255.
pub fn save_mask(mask: &LabelMap, path: &Path, ignore_index: u32) -> Result<()> {
    let mut raw = Vec::with_capacity(mask.labels().len());
    for &l in mask.labels() {
        raw.push(if l == ignore_index {
            DISK_IGNORE
        } else if l < DISK_IGNORE as u32 {
            l as u8
        } else {
            return Err(SegError::Data(format!("label {l} cannot be stored in an 8-bit mask")));
        });
    }
    let gray = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("h*w labels");
    gray.save(path).map_err(|source| SegError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `root/images/NNNN.png`, `root/masks/NNNN.png` and `root/manifest.json`.
/// Ignore labels are stored as 255; images are quantized to 8 bits.
pub fn write_folder(samples: &[SegmentationSample], root: &Path, n_cls: usize, ignore_index: u32) -> Result<Manifest> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:04}.png");
        let (h, w) = (s.height(), s.width());
        let data = s.image.data();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            image::Rgb(std::array::from_fn(|c| {
                (data[c * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8
            }))
        });
        let ip = images.join(&name);
        rgb.save(&ip).map_err(|source| SegError::Image { path: ip, source })?;
        save_mask(&s.mask, &masks.join(&name), ignore_index)?;
        pairs.push((PathBuf::from("images").join(&name), PathBuf::from("masks").join(&name)));
    }
    let manifest = Manifest {
        n_cls,
        ignore_index,
        pairs,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

fn flip_image(image: &Tensor<f32>) -> Tensor<f32> {
    segkit_tensor::kernels::flip_last(image)
}

pub fn flip_horizontal(sample: &SegmentationSample) -> SegmentationSample {
    SegmentationSample {
        image: flip_image(&sample.image),
        mask: sample.mask.flip_horizontal(),
    }
}

/// Horizontal flip with probability 0.5.
pub fn random_flip(sample: &SegmentationSample, rng: &mut impl Rng) -> SegmentationSample {
    if rng.random_bool(0.5) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    }
}

/// Uniform random `crop_h x crop_w` window. Undersized samples are first
/// padded at the bottom/right with the per-channel mean and `ignore_index`.
pub fn random_crop(
    sample: &SegmentationSample,
    crop_h: usize,
    crop_w: usize,
    ignore_index: u32,
    rng: &mut impl Rng,
) -> Result<SegmentationSample> {
    if crop_h == 0 || crop_w == 0 {
        return Err(SegError::Config("crop size must be positive".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    let (ph, pw) = (h.max(crop_h), w.max(crop_w));
    let padded = if (ph, pw) == (h, w) {
        sample.clone()
    } else {
        let plane = h * w;
        let data = sample.image.data();
        let means: Vec<f32> = (0..3)
            .map(|c| data[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32)
            .collect();
        let image = Tensor::from_fn(&[3, ph, pw], |j| {
            let (c, y, x) = (j / (ph * pw), (j / pw) % ph, j % pw);
            if y < h && x < w {
                data[c * plane + y * w + x]
            } else {
                means[c]
            }
        });
        SegmentationSample {
            image,
            mask: sample.mask.pad(ph, pw, ignore_index),
        }
    };
    let y0 = rng.random_range(0..=ph - crop_h);
    let x0 = rng.random_range(0..=pw - crop_w);
    let src = padded.image.data();
    let image = Tensor::from_fn(&[3, crop_h, crop_w], |j| {
        let (c, y, x) = (j / (crop_h * crop_w), (j / crop_w) % crop_h, j % crop_w);
        src[c * ph * pw + (y0 + y) * pw + x0 + x]
    });
    SegmentationSample::new(image, padded.mask.crop(y0, x0, crop_h, crop_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        let s = SegmentationSample::new(Tensor::full(&[3, 1, 2], 0.5), LabelMap::filled(1, 2, 0)).unwrap();
        let identity = DataConfig::default();
        assert_eq!(identity.model_inputs(std::slice::from_ref(&s)), vec![s.clone()]);
        let cfg = DataConfig {
            mean: [0.5, 0.25, 0.0],
            std: [1.0, 0.5, 2.0],
            ..DataConfig::default()
        };
        let out = cfg.model_inputs(&[s]);
        assert_eq!(out[0].image.data(), &[0.0, 0.0, 0.5, 0.5, 0.25, 0.25]);
        let bad = DataConfig {
            std: [1.0, 0.0, 1.0],
            ..DataConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            n_images: 8,
            height: 64,
            width: 64,
            n_cls: 5,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&spec(3)).unwrap();
        let b = generate_synthetic(&spec(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&spec(4)).unwrap());
    }

    #[test]
    fn synthetic_covers_all_classes() {
        for seed in 0..5 {
            let set = generate_synthetic(&spec(seed)).unwrap();
            let mut seen = [0usize; 5];
            for s in &set {
                s.check_labels(5, DEFAULT_IGNORE_INDEX).unwrap();
                for &l in s.mask.labels() {
                    seen[l as usize] += 1;
                }
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert!(seen.iter().all(|&c| c > 0), "seed {seed}: {seen:?}");
        }
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        let mut s = spec(0);
        s.height = 60;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(0);
        s.n_cls = 1;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let s = &generate_synthetic(&spec(1)).unwrap()[0];
        assert_eq!(&flip_horizontal(&flip_horizontal(s)), s);
        assert_ne!(&flip_horizontal(s), s);
    }

    #[test]
    fn full_size_crop_is_identity() {
        let s = &generate_synthetic(&spec(2)).unwrap()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(&random_crop(s, 64, 64, 255, &mut rng).unwrap(), s);
    }

    #[test]
    fn crop_pads_with_ignore_and_mean() {
        let s = &generate_synthetic(&spec(2)).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_crop(s, 96, 80, 255, &mut rng).unwrap();
        assert_eq!(c.image.shape(), &[3, 96, 80]);
        assert_eq!(c.mask.get(95, 79), 255);
        let mut labels: Vec<u32> = c.mask.labels().to_vec();
        labels.retain(|&l| l != 255);
        assert!(labels.iter().all(|l| s.mask.labels().contains(l)));
        let small = random_crop(s, 32, 16, 255, &mut rng).unwrap();
        assert_eq!((small.height(), small.width()), (32, 16));
    }

    #[test]
    fn folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = generate_synthetic(&spec(5)).unwrap();
        let mut labels = set[0].mask.labels().to_vec();
        labels[0] = DEFAULT_IGNORE_INDEX;
        set[0].mask = LabelMap::new(64, 64, labels).unwrap();
        write_folder(&set, dir.path(), 5, DEFAULT_IGNORE_INDEX).unwrap();
        let back = load_folder(
            &dir.path().join("images"),
            &dir.path().join("masks"),
            DEFAULT_IGNORE_INDEX,
        )
        .unwrap();
        assert_eq!(back, set);
        let (m, via_manifest) = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.n_cls, 5);
        assert_eq!(via_manifest, set);
        let remapped = load_folder(&dir.path().join("images"), &dir.path().join("masks"), 99).unwrap();
        assert_eq!(remapped[0].mask.get(0, 0), 99);
    }

    #[test]
    fn empty_and_missing_folders() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_folder(dir.path(), dir.path(), 255).unwrap().is_empty());
        let set = generate_synthetic(&spec(6)).unwrap();
        write_folder(&set[..1], dir.path(), 5, 255).unwrap();
        fs::remove_file(dir.path().join("masks/0000.png")).unwrap();
        let err = load_folder(&dir.path().join("images"), &dir.path().join("masks"), 255).unwrap_err();
        assert!(err.to_string().contains("0000.png"));
    }
}
