//! Image/mask datasets, flip augmentation, conversion to network inputs and
//! a seeded synthetic shape dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AuxMode, ModelConfig};
use crate::nn::{kernels, Tensor};
use crate::scalar::Scalar;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// An RGB image with its binary mask (stored as 0/255).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

impl Sample {
    pub fn foreground_pixels(&self) -> usize {
        self.mask.as_raw().iter().filter(|&&v| v != 0).count()
    }
}

/// `(1, 3, H, W)` tensor with channel values scaled to `[0, 1]`.
pub fn image_to_tensor<T: Scalar>(image: &RgbImage) -> Tensor<T> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = image.as_raw();
    let scale = T::lit(255.0);
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, pos) = (i / (h * w), i % (h * w));
        T::lit(raw[pos * 3 + c] as f64) / scale
    })
}

/// Per-channel `(x − mean)/std` with the fixed ImageNet statistics.
pub fn normalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims4().expect("image batch is rank 4");
    let plane = h * w;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = (*v - T::lit(IMAGENET_MEAN[ch])) / T::lit(IMAGENET_STD[ch]);
    }
    debug_assert_eq!(out.numel(), n * c * plane);
    out
}

fn binarize(mask: &GrayImage) -> (GrayImage, usize) {
    let mut nonbinary = 0;
    let mut out = mask.clone();
    for v in out.iter_mut() {
        if *v != 0 && *v != 255 {
            nonbinary += 1;
        }
        *v = if *v >= 128 { 255 } else { 0 };
    }
    (out, nonbinary)
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    /// Stems present in only one of the two directories.
    pub unmatched: Vec<String>,
    /// `(stem, reason)` for pairs that could not be used.
    pub rejected: Vec<(String, String)>,
    /// Mask pixels that were neither 0 nor 255 before thresholding at 128.
    pub nonbinary_pixels: usize,
}

fn files_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.as_deref().is_some_and(|e| exts.contains(&e)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs `images_dir/*.{png,jpg,jpeg}` with `masks_dir/*.png` by file stem,
/// in lexicographic stem order.
pub fn load_dataset(images_dir: &Path, masks_dir: &Path) -> Result<LoadReport> {
    let images = files_by_stem(images_dir, &["png", "jpg", "jpeg"])?;
    let masks = files_by_stem(masks_dir, &["png"])?;
    let mut report = LoadReport::default();
    for stem in images.keys().filter(|k| !masks.contains_key(*k)) {
        report.unmatched.push(stem.clone());
    }
    for stem in masks.keys().filter(|k| !images.contains_key(*k)) {
        report.unmatched.push(stem.clone());
    }
    for (stem, img_path) in &images {
        let Some(mask_path) = masks.get(stem) else { continue };
        let image = image::open(img_path).map_err(|e| Error::image(img_path, e))?.to_rgb8();
        let mask = image::open(mask_path).map_err(|e| Error::image(mask_path, e))?.to_luma8();
        if image.dimensions() != mask.dimensions() {
            let reason = format!(
                "image is {}x{} but mask is {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            );
            log::warn!("skipping {stem}: {reason}");
            report.rejected.push((stem.clone(), reason));
            continue;
        }
        let (mask, nonbinary) = binarize(&mask);
        report.nonbinary_pixels += nonbinary;
        report.samples.push(Sample {
            id: stem.clone(),
            image,
            mask,
        });
    }
    if !report.unmatched.is_empty() {
        log::warn!("{} file(s) without a counterpart", report.unmatched.len());
    }
    if report.nonbinary_pixels > 0 {
        log::info!("{} non-binary mask pixel(s) thresholded at 128", report.nonbinary_pixels);
    }
    if report.samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable image/mask pairs in {} and {}",
            images_dir.display(),
            masks_dir.display()
        )));
    }
    Ok(report)
}

/// Loads `<root>/images` and `<root>/masks`.
pub fn load_dataset_root(root: &Path) -> Result<LoadReport> {
    load_dataset(&root.join("images"), &root.join("masks"))
}

/// Independent 50% horizontal and 50% vertical flips, applied identically to
/// image and mask.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    flip(sample, hflip, vflip)
}

pub fn flip(sample: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let mut out = sample.clone();
    if horizontal {
        image::imageops::flip_horizontal_in_place(&mut out.image);
        image::imageops::flip_horizontal_in_place(&mut out.mask);
    }
    if vertical {
        image::imageops::flip_vertical_in_place(&mut out.image);
        image::imageops::flip_vertical_in_place(&mut out.mask);
    }
    out
}

/// Network-ready tensors for one sample.
#[derive(Clone, Debug)]
pub struct ModelInputs<T> {
    /// `(1, 3, H_h, W_h)`, normalized.
    pub high: Tensor<T>,
    /// `(1, 3, H_l, W_l)`, normalized (equal to `high` when there is no
    /// auxiliary branch and the resolutions coincide).
    pub low: Tensor<T>,
    /// `(1, 1, H_h, W_h)` with values in {0, 1}.
    pub gt: Tensor<T>,
}

fn resize_image<T: Scalar>(raw: &Tensor<T>, [th, tw]: [usize; 2]) -> Tensor<T> {
    let [n, c, h, w] = raw.dims4().expect("rank 4");
    if (h, w) == (th, tw) {
        return raw.clone();
    }
    let data = kernels::resize_bilinear_planes(raw.data(), n * c, h, w, th, tw);
    Tensor::new(vec![n, c, th, tw], data).expect("resize output matches shape")
}

/// Bilinear resize of the image to both resolutions followed by
/// normalization; nearest-neighbour resize of the mask to the high
/// resolution.
pub fn to_model_inputs<T: Scalar>(sample: &Sample, cfg: &ModelConfig) -> ModelInputs<T> {
    let raw = image_to_tensor::<T>(&sample.image);
    let high = normalize(&resize_image(&raw, cfg.high_res));
    let low = if cfg.aux_mode == AuxMode::None {
        high.clone()
    } else {
        normalize(&resize_image(&raw, cfg.low_res))
    };
    let (w, h) = sample.mask.dimensions();
    let [th, tw] = cfg.high_res;
    let mask: Vec<T> = sample
        .mask
        .as_raw()
        .iter()
        .map(|&v| if v >= 128 { T::one() } else { T::zero() })
        .collect();
    let gt = kernels::resize_nearest_planes(&mask, 1, h as usize, w as usize, th, tw);
    ModelInputs {
        high,
        low,
        gt: Tensor::new(vec![1, 1, th, tw], gt).expect("mask resize matches shape"),
    }
}

/// Deterministic order of sample indices for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000 ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Annulus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub kinds: Vec<ShapeKind>,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl SynthSpec {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            height: size,
            width: size,
            seed,
            kinds: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Annulus],
            min_shapes: 1,
            max_shapes: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Argument("synthetic canvas must be at least 16x16".into()));
        }
        if self.kinds.is_empty() || self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return Err(Error::Argument("synthetic spec needs 1..=3 shapes of at least one kind".into()));
        }
        Ok(())
    }
}

/// One filled shape in pixel coordinates (pixel `(x, y)` covers
/// `[x, x+1) × [y, y+1)` and is inside when its centre is).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
    Annulus { cx: f64, cy: f64, r_outer: f64, r_inner: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rectangle { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Annulus { cx, cy, r_outer, r_inner } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r_outer * r_outer && d2 >= r_inner * r_inner
            }
        }
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)` enclosing the shape.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let hx = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let hy = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                (cx - hx, cy - hy, cx + hx, cy + hy)
            }
            Shape::Rectangle { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Annulus { cx, cy, r_outer, .. } => (cx - r_outer, cy - r_outer, cx + r_outer, cy + r_outer),
        }
    }
}

/// Pixel-centre rasterization of a union of shapes.
pub fn rasterize(shapes: &[Shape], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            out[y * width + x] = shapes.iter().any(|s| s.contains(px, py));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub id: String,
    pub shapes: Vec<Shape>,
    pub colors: Vec<[u8; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub samples: Vec<SynthSample>,
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [240, 200, 30],
    [200, 50, 220],
    [30, 210, 210],
];

pub const MIN_FG_FRACTION: f64 = 0.05;
pub const MAX_FG_FRACTION: f64 = 0.6;

fn random_shape(rng: &mut ChaCha8Rng, kind: ShapeKind, h: f64, w: f64) -> Shape {
    let m = h.min(w);
    match kind {
        ShapeKind::Ellipse => {
            let rx = rng.random_range(0.15 * m..0.32 * m);
            let ry = rng.random_range(0.15 * m..0.32 * m);
            Shape::Ellipse {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                rx,
                ry,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        }
        ShapeKind::Rectangle => {
            let (sw, sh) = (rng.random_range(0.3 * m..0.6 * m), rng.random_range(0.3 * m..0.6 * m));
            let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
            Shape::Rectangle {
                x0,
                y0,
                x1: x0 + sw,
                y1: y0 + sh,
            }
        }
        ShapeKind::Annulus => {
            let r_outer = rng.random_range(0.2 * m..0.35 * m);
            let thickness = rng.random_range((0.35 * r_outer).max(3.0)..(0.6 * r_outer).max(3.5));
            Shape::Annulus {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                r_outer,
                r_inner: (r_outer - thickness).max(0.0),
            }
        }
    }
}

/// Draws shapes that lie inside the canvas with a 2-pixel margin and whose
/// bounds are at least 2 pixels apart, so masks have exactly one connected
/// component per shape.
fn place_shapes(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Option<Vec<Shape>> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count {
        attempts += 1;
        if attempts > 200 {
            return None;
        }
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let s = random_shape(rng, kind, h, w);
        let (x0, y0, x1, y1) = s.bounds();
        if x0 < 2.0 || y0 < 2.0 || x1 > w - 2.0 || y1 > h - 2.0 {
            continue;
        }
        let clear = shapes.iter().all(|o| {
            let (a0, b0, a1, b1) = o.bounds();
            x1 + 2.0 <= a0 || a1 + 2.0 <= x0 || y1 + 2.0 <= b0 || b1 + 2.0 <= y0
        });
        if clear {
            shapes.push(s);
        }
    }
    Some(shapes)
}

/// Renders one synthetic sample from its shapes and colours.
pub fn render(spec: &SynthSpec, shapes: &[Shape], colors: &[[u8; 3]], noise_seed: u64) -> (RgbImage, GrayImage) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut image = RgbImage::new(w as u32, h as u32);
    for px in image.pixels_mut() {
        *px = Rgb([rng.random_range(60..=140), rng.random_range(60..=140), rng.random_range(60..=140)]);
    }
    let mut mask = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(i) = shapes.iter().position(|s| s.contains(px, py)) {
                image.put_pixel(x as u32, y as u32, Rgb(colors[i]));
                mask.put_pixel(x as u32, y as u32, image::Luma([255]));
            }
        }
    }
    (image, mask)
}

fn noise_seed(spec: &SynthSpec, index: usize) -> u64 {
    spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1)
}

/// Generates `spec.n` samples in memory together with the manifest.
pub fn synthesize(spec: &SynthSpec) -> Result<(Vec<Sample>, SynthManifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n);
    let mut entries = Vec::with_capacity(spec.n);
    let area = (spec.height * spec.width) as f64;
    for index in 0..spec.n {
        let id = format!("synth_{index:04}");
        let mut tries = 0;
        let shapes = loop {
            tries += 1;
            if tries > 1000 {
                return Err(Error::Argument(format!(
                    "could not place shapes satisfying the foreground bounds on a {}x{} canvas",
                    spec.height, spec.width
                )));
            }
            let Some(shapes) = place_shapes(&mut rng, spec) else { continue };
            let fg = rasterize(&shapes, spec.height, spec.width).iter().filter(|&&v| v).count() as f64;
            if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&(fg / area)) {
                break shapes;
            }
        };
        let mut palette = PALETTE.to_vec();
        palette.shuffle(&mut rng);
        let colors = palette[..shapes.len()].to_vec();
        let (image, mask) = render(spec, &shapes, &colors, noise_seed(spec, index));
        samples.push(Sample {
            id: id.clone(),
            image,
            mask,
        });
        entries.push(SynthSample { id, shapes, colors });
    }
    Ok((
        samples,
        SynthManifest {
            spec: spec.clone(),
            samples: entries,
        },
    ))
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::image(path, other),
    })
}

/// Writes `images/`, `masks/` and `manifest.json` under `out_dir`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SynthManifest> {
    let (samples, manifest) = synthesize(spec)?;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in &samples {
        save_png(&s.image, &images.join(format!("{}.png", s.id)))?;
        save_png(&s.mask, &masks.join(format!("{}.png", s.id)))?;
    }
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
