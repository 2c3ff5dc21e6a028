//! Synthetic densely labelled scenes, photometric augmentation and dataset
//! persistence.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CropBox, RoiPlan};
use crate::rng::{rng_for, Rng};

/// `C × H × W` image with values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Base colours of the shape classes; class `c ≥ 1` uses entry `c − 1`.
const PALETTE: [[f64; 3]; 9] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.75, 0.25, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.45, 0.30, 0.15],
    [0.95, 0.95, 0.95],
];
const BACKGROUND: [f64; 3] = [0.45, 0.45, 0.45];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub size: usize,
    pub patch_size: usize,
    /// Background plus `classes − 1` shape classes.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
    /// Strength of per-scene and per-shape photometric variation in `[0, 1]`.
    pub nuisance: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { size: 64, patch_size: 8, classes: 4, min_shapes: 1, max_shapes: 4, seed: 0, nuisance: 1.0 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > PALETTE.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "class count {} must lie in [2, {}]",
                self.classes,
                PALETTE.len() + 1
            )));
        }
        if self.patch_size == 0 || self.size % self.patch_size != 0 || self.size < 4 * self.patch_size {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a multiple of the patch size {} and at least 4 patches wide",
                self.size, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.nuisance) {
            return Err(Error::InvalidArgument(format!("nuisance {} outside [0, 1]", self.nuisance)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::InvalidArgument("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    classes: usize,
    data: Array2<u8>,
}

impl LabelMask {
    pub fn new(data: Array2<u8>, classes: usize) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} not below class count {classes}")));
        }
        Ok(Self { classes, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.data[[y, x]] as usize
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl ShapeKind {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            ShapeKind::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            ShapeKind::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            ShapeKind::Triangle { p } => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [cross(p[0], p[1]), cross(p[1], p[2]), cross(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ShapeInstance {
    class: usize,
    kind: ShapeKind,
    color: [f64; 3],
    /// stripe texture: amplitude, frequency (cycles per pixel), orientation
    stripes: (f64, f64, f64),
}

fn random_shape(rng: &mut Rng, size: f64, class: usize, nuisance: f64) -> ShapeInstance {
    let r = rng.random_range(0.12..0.3) * size;
    let cx = rng.random_range(0.0..size);
    let cy = rng.random_range(0.0..size);
    let kind = match rng.random_range(0..3) {
        0 => {
            let aspect: f64 = rng.random_range(0.6..1.6);
            let (hw, hh) = (r * aspect.sqrt(), r / aspect.sqrt());
            ShapeKind::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
        }
        1 => ShapeKind::Circle { cx, cy, r },
        _ => {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let p = [0, 1, 2].map(|k| {
                let a = phase + k as f64 * std::f64::consts::TAU / 3.0;
                (cx + 1.3 * r * a.cos(), cy + 1.3 * r * a.sin())
            });
            ShapeKind::Triangle { p }
        }
    };
    let base = PALETTE[class - 1];
    let value = 1.0 + nuisance * rng.random_range(-0.4..0.4);
    let color = base.map(|c| ((c + rng.random_range(-0.08..0.08)) * value).clamp(0.0, 1.0));
    let stripes = (rng.random_range(0.0..0.12), rng.random_range(0.1..0.35), rng.random_range(0.0..std::f64::consts::PI));
    ShapeInstance { class, kind, color, stripes }
}

fn stripe(params: (f64, f64, f64), x: f64, y: f64) -> f64 {
    let (amp, freq, angle) = params;
    amp * (std::f64::consts::TAU * freq * (x * angle.cos() + y * angle.sin())).sin()
}

/// Renders scene `index` of `spec`. The output depends only on
/// `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(Image, LabelMask)> {
    render_scene(spec, index).map(|(img, mask, _)| (img, mask))
}

fn render_scene(spec: &SceneSpec, index: u64) -> Result<(Image, LabelMask, Vec<ShapeInstance>)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "scene", index);
    let n = spec.size;
    let size = n as f64;
    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<ShapeInstance> = (0..n_shapes)
        .map(|_| {
            let class = rng.random_range(1..spec.classes);
            random_shape(&mut rng, size, class, spec.nuisance)
        })
        .collect();
    let bg_color = BACKGROUND.map(|c| c + rng.random_range(-0.08..0.08));
    let bg_stripes = (rng.random_range(0.02..0.08), rng.random_range(0.05..0.2), rng.random_range(0.0..std::f64::consts::PI));
    let nu = spec.nuisance;
    let gain = 1.0 + rng.random_range(-0.2..0.2) * (1.0 + 1.5 * nu);
    let cast: [f64; 3] = std::array::from_fn(|_| nu * rng.random_range(-0.15..0.15));
    let noise = Normal::new(0.0, 0.03 + 0.05 * nu).expect("valid std");

    let mut image = Array3::zeros((3, n, n));
    let mut mask = Array2::<u8>::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // last shape drawn wins
            let top = shapes.iter().rev().find(|s| s.kind.contains(px, py));
            let (color, tex) = match top {
                Some(s) => {
                    mask[[y, x]] = s.class as u8;
                    (s.color, stripe(s.stripes, px, py))
                }
                None => (bg_color, stripe(bg_stripes, px, py)),
            };
            for c in 0..3 {
                let v = gain * (color[c] + tex) + cast[c] + noise.sample(&mut rng);
                image[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((image, LabelMask::new(mask, spec.classes)?, shapes))
}

/// Photometric augmentation strength in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentStrength(f64);

impl AugmentStrength {
    pub const NONE: AugmentStrength = AugmentStrength(0.0);

    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!("augmentation strength {s} outside [0, 1]")));
        }
        Ok(Self(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn jitter(self) -> f64 {
        0.4 * self.0
    }

    pub fn blur_sigma(self) -> f64 {
        2.0 * self.0
    }

    pub fn blur_probability(self) -> f64 {
        (2.0 * self.0).min(1.0) * 0.5
    }

    pub fn noise_std(self) -> f64 {
        0.05 * self.0
    }
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / total).collect();
    let (c, h, w) = image.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[[ch, y, x]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * image[[ch, y, clamp(x as isize + k as isize - radius, w)]])
                    .sum();
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * tmp[[ch, clamp(y as isize + k as isize - radius, h), x]])
                    .sum();
            }
        }
    }
    out
}

/// Photometric augmentation: brightness, contrast and saturation jitter
/// (±0.4 s), Gaussian blur (σ = 2 s, applied with probability min(1, 2 s)/2)
/// and additive pixel noise (std 0.05 s), clamped to `[0, 1]`. Strength 0
/// returns the input unchanged.
pub fn augment(image: &Image, strength: AugmentStrength, rng: &mut Rng) -> Image {
    let s = strength.value();
    if s == 0.0 {
        return image.clone();
    }
    let amp = strength.jitter();
    let brightness = rng.random_range(-amp..=amp);
    let contrast = 1.0 + rng.random_range(-amp..=amp);
    let saturation = 1.0 + rng.random_range(-amp..=amp);
    let blur = rng.random_bool(strength.blur_probability());

    let mut out = image.mapv(|v| v + brightness);
    let mean = out.mean().unwrap_or(0.0);
    out.mapv_inplace(|v| mean + contrast * (v - mean));
    if out.dim().0 == 3 {
        let gray = out.index_axis(Axis(0), 0).to_owned() * 0.299
            + &(out.index_axis(Axis(0), 1).to_owned() * 0.587)
            + &(out.index_axis(Axis(0), 2).to_owned() * 0.114);
        for mut ch in out.axis_iter_mut(Axis(0)) {
            ch.zip_mut_with(&gray, |v, &g| *v = g + saturation * (*v - g));
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    if blur {
        out = gaussian_blur(&out, strength.blur_sigma());
    }
    let noise = Normal::new(0.0, strength.noise_std()).expect("non-negative std");
    out.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    out
}

/// Bilinear crop-and-resize of an image region to `out_h × out_w`, sampling
/// at output pixel centres (the same convention as ROI align).
pub fn crop_resize(image: &Image, bbox: &CropBox, out_h: usize, out_w: usize) -> Result<Image> {
    let (c, h, w) = image.dim();
    let plan = RoiPlan::new(h, w, bbox, out_h, out_w)?;
    let rows = image.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned().into_shape_with_order((h * w, c)).expect("contiguous");
    let resampled = plan.apply(&rows);
    let hwc = resampled.into_shape_with_order((out_h, out_w, c)).expect("sizes agree");
    Ok(hwc.permuted_axes([2, 0, 1]).as_standard_layout().into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Images and masks in stable index order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Image>,
    pub masks: Vec<LabelMask>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, count: usize) -> Result<Self> {
        spec.validate()?;
        let (images, masks) = (0..count as u64).map(|i| generate_scene(spec, i)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Ok(Self {
            manifest: Manifest { count, size: spec.size, classes: spec.classes, seed: spec.seed },
            images,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of the training and evaluation splits: the last
    /// `round(eval_fraction · len)` samples (at least one) are held out.
    pub fn split_indices(&self, eval_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let n_eval = ((eval_fraction * n as f64).round() as usize).clamp(1.min(n), n);
        let cut = n - n_eval;
        ((0..cut).collect(), (cut..n).collect())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        for (i, (img, mask)) in self.images.iter().zip(&self.masks).enumerate() {
            write_image_png(img, &dir.join("images").join(format!("{i:06}.png")))?;
            write_mask_png(mask, &dir.join("masks").join(format!("{i:06}.png")))?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptFile { path: manifest_path.clone(), reason: e.to_string() })?;
        if manifest.count == 0 {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        let mut images = Vec::with_capacity(manifest.count);
        let mut masks = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let img = read_image_png(&dir.join("images").join(format!("{i:06}.png")))?;
            let mask_path = dir.join("masks").join(format!("{i:06}.png"));
            let mask = read_mask_png(&mask_path, manifest.classes)?;
            if img.dim() != (3, manifest.size, manifest.size) || mask.height() != manifest.size || mask.width() != manifest.size {
                return Err(Error::CorruptFile { path: mask_path, reason: "dimensions disagree with manifest".into() });
            }
            images.push(img);
            masks.push(mask);
        }
        Ok(Self { manifest, images, masks })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|ch| quantize(img[[ch, y as usize, x as usize]])))
    });
    buf.save(path).map_err(|e| io_or_corrupt(e, path))
}

pub fn write_mask_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let (h, w) = mask.data.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask.data[[y as usize, x as usize]]]));
    buf.save(path).map_err(|e| io_or_corrupt(e, path))
}

fn io_or_corrupt(e: image::ImageError, path: &Path) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::CorruptFile { path: PathBuf::from(path), reason: other.to_string() },
    }
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::CorruptFile { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn read_image_png(path: &Path) -> Result<Image> {
    let rgb = open_png(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn read_mask_png(path: &Path, classes: usize) -> Result<LabelMask> {
    let img = open_png(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::CorruptFile { path: path.to_path_buf(), reason: "mask must be 8-bit single channel".into() });
    }
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| gray.get_pixel(x as u32, y as u32)[0]);
    LabelMask::new(data, classes).map_err(|e| Error::CorruptFile { path: path.to_path_buf(), reason: e.to_string() })
}
