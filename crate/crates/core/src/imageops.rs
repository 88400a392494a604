//! Deterministic image preprocessing.
//!
//! Images are dense `H x W x 3` rasters of real pixel values on the 8-bit
//! scale. All operations here are pure functions of their inputs plus an
//! explicit seed, so pipelines are reproducible bit-for-bit and safe to run
//! in parallel across images.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::seeds;

/// Blend denominator for the block-quantize distortion: a level equal to
/// `BLOCK_QUANTIZE_LEVEL_MAX` replaces each 8x8 block entirely by its mean.
pub const BLOCK_QUANTIZE_LEVEL_MAX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ImageOpsError {
    #[error("degenerate image dimensions {width}x{height}")]
    DegenerateImage { width: usize, height: usize },
    #[error("pixel buffer length {got} does not match {width}x{height}x3")]
    BufferMismatch { width: usize, height: usize, got: usize },
    #[error("non-finite pixel value at index {index}")]
    NonFinitePixel { index: usize },
    #[error("crop size {size} exceeds image dimensions {width}x{height}")]
    CropTooLarge { size: usize, width: usize, height: usize },
    #[error("requested {n} crops but n must be >= 1")]
    ZeroCrops { n: usize },
    #[error("mean shape {mean_side} incompatible with crop size {crop_side}")]
    MeanShapeMismatch { mean_side: usize, crop_side: usize },
    #[error("unknown distortion kind `{0}`")]
    UnknownDistortion(String),
    #[error("negative distortion level {0}")]
    NegativeLevel(f64),
    #[error("unsupported image format for {path} (PNG and BMP only; lossy formats would add uncontrolled distortion)")]
    UnsupportedFormat { path: String },
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Dense RGB raster with real-valued pixels on the `[0, 255]` scale.
///
/// Layout is row-major, channel-interleaved: `pixels[(y*width + x)*3 + c]`.
/// Mean-subtracted crops reuse this type with values outside `[0, 255]`;
/// the only hard invariant is finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImageOpsError> {
        if width == 0 || height == 0 {
            return Err(ImageOpsError::DegenerateImage { width, height });
        }
        if pixels.len() != width * height * 3 {
            return Err(ImageOpsError::BufferMismatch { width, height, got: pixels.len() });
        }
        if let Some(index) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(ImageOpsError::NonFinitePixel { index });
        }
        Ok(Self { width, height, pixels })
    }

    /// Constant-color image, useful for tests and as a distortion fixed point.
    pub fn constant(width: usize, height: usize, value: [f32; 3]) -> Result<Self, ImageOpsError> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&value);
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    /// Per-channel means, accumulated in f64.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.pixels.chunks_exact(3) {
            sums[0] += px[0] as f64;
            sums[1] += px[1] as f64;
            sums[2] += px[2] as f64;
        }
        let n = (self.width * self.height) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }
}

/// A square sub-region of a source image, carrying its top-left offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub image: RasterImage,
    pub origin: (usize, usize),
}

impl Crop {
    pub fn size(&self) -> usize {
        self.image.width()
    }
}

/// Mean to subtract before feeding crops to a backbone: either per-channel
/// scalars or a full raster matching the backbone input size.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanImage {
    PerChannel([f32; 3]),
    Full(RasterImage),
}

/// Result of [`random_crops`]; `with_replacement` flags that the request
/// exceeded the number of distinct origins.
#[derive(Debug, Clone)]
pub struct CropSample {
    pub crops: Vec<Crop>,
    pub with_replacement: bool,
}

/// Rescale so the shorter side equals `target`, preserving aspect ratio
/// (the longer side rounds to nearest). Bilinear interpolation with
/// pixel-center alignment; an image already at the target square size passes
/// through unchanged.
pub fn resize_shorter_side(image: &RasterImage, target: usize) -> Result<RasterImage, ImageOpsError> {
    if target == 0 {
        return Err(ImageOpsError::DegenerateImage { width: target, height: target });
    }
    let (w, h) = (image.width(), image.height());
    let (out_w, out_h) = if w <= h {
        let scale = target as f64 / w as f64;
        (target, (h as f64 * scale).round().max(1.0) as usize)
    } else {
        let scale = target as f64 / h as f64;
        ((w as f64 * scale).round().max(1.0) as usize, target)
    };
    if out_w == w && out_h == h {
        return Ok(image.clone());
    }
    let mut pixels = vec![0.0f32; out_w * out_h * 3];
    let x_ratio = w as f64 / out_w as f64;
    let y_ratio = h as f64 / out_h as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * y_ratio - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * x_ratio - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let p00 = image.get(x0, y0, c) as f64;
                let p10 = image.get(x1, y0, c) as f64;
                let p01 = image.get(x0, y1, c) as f64;
                let p11 = image.get(x1, y1, c) as f64;
                let top = p00 + (p10 - p00) * fx;
                let bottom = p01 + (p11 - p01) * fx;
                pixels[(oy * out_w + ox) * 3 + c] = (top + (bottom - top) * fy) as f32;
            }
        }
    }
    RasterImage::new(out_w, out_h, pixels)
}

/// Central square crop at origin `(floor((W-size)/2), floor((H-size)/2))`.
/// No implicit upscaling: `size` must fit in both dimensions.
pub fn center_crop(image: &RasterImage, size: usize) -> Result<Crop, ImageOpsError> {
    if size == 0 || size > image.width() || size > image.height() {
        return Err(ImageOpsError::CropTooLarge {
            size,
            width: image.width(),
            height: image.height(),
        });
    }
    let origin = ((image.width() - size) / 2, (image.height() - size) / 2);
    Ok(extract(image, origin, size))
}

fn extract(image: &RasterImage, origin: (usize, usize), size: usize) -> Crop {
    let (ox, oy) = origin;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let row = ((oy + y) * image.width() + ox) * 3;
        pixels.extend_from_slice(&image.pixels()[row..row + size * 3]);
    }
    Crop { image: RasterImage::new(size, size, pixels).expect("crop buffer"), origin }
}

/// Sample `n` square crops at the original image scale.
///
/// Origins are uniform over the valid offset grid and distinct whenever the
/// grid has at least `n` cells; otherwise sampling falls back to replacement
/// and the result is flagged. Deterministic for a fixed seed.
pub fn random_crops(
    image: &RasterImage,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<CropSample, ImageOpsError> {
    if n == 0 {
        return Err(ImageOpsError::ZeroCrops { n });
    }
    if size == 0 || size > image.width() || size > image.height() {
        return Err(ImageOpsError::CropTooLarge {
            size,
            width: image.width(),
            height: image.height(),
        });
    }
    let grid_w = image.width() - size + 1;
    let grid_h = image.height() - size + 1;
    let grid = grid_w * grid_h;
    let mut rng = seeds::rng_from_seed(seed);
    let with_replacement = n > grid;
    let origins: Vec<usize> = if with_replacement {
        (0..n).map(|_| rng.random_range(0..grid)).collect()
    } else {
        sample_distinct(&mut rng, grid, n)
    };
    let crops = origins
        .into_iter()
        .map(|o| extract(image, (o % grid_w, o / grid_w), size))
        .collect();
    Ok(CropSample { crops, with_replacement })
}

/// Partial Fisher-Yates over `0..grid` without materializing the grid.
fn sample_distinct(rng: &mut rand_chacha::ChaCha8Rng, grid: usize, n: usize) -> Vec<usize> {
    use std::collections::HashMap;
    let mut swapped: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.random_range(i..grid);
        let vj = *swapped.get(&j).unwrap_or(&j);
        let vi = *swapped.get(&i).unwrap_or(&i);
        out.push(vj);
        swapped.insert(j, vi);
    }
    out
}

/// Elementwise `crop - mean`. Output pixels may be negative.
pub fn subtract_mean(crop: &Crop, mean: &MeanImage) -> Result<Crop, ImageOpsError> {
    let size = crop.size();
    let mut pixels = crop.image.pixels().to_vec();
    match mean {
        MeanImage::PerChannel(m) => {
            for px in pixels.chunks_exact_mut(3) {
                px[0] -= m[0];
                px[1] -= m[1];
                px[2] -= m[2];
            }
        }
        MeanImage::Full(raster) => {
            if raster.width() != size || raster.height() != size {
                return Err(ImageOpsError::MeanShapeMismatch {
                    mean_side: raster.width(),
                    crop_side: size,
                });
            }
            for (p, m) in pixels.iter_mut().zip(raster.pixels()) {
                *p -= m;
            }
        }
    }
    Ok(Crop { image: RasterImage::new(size, size, pixels)?, origin: crop.origin })
}

/// Synthetic distortion families for desk-scale datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    GaussianBlur,
    GaussianNoise,
    BlockQuantize,
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DistortionKind::GaussianBlur => "gaussian-blur",
            DistortionKind::GaussianNoise => "gaussian-noise",
            DistortionKind::BlockQuantize => "block-quantize",
        };
        f.write_str(s)
    }
}

impl FromStr for DistortionKind {
    type Err = ImageOpsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian-blur" => Ok(DistortionKind::GaussianBlur),
            "gaussian-noise" => Ok(DistortionKind::GaussianNoise),
            "block-quantize" => Ok(DistortionKind::BlockQuantize),
            other => Err(ImageOpsError::UnknownDistortion(other.to_string())),
        }
    }
}

/// Apply a distortion at the given severity. Level 0 is the identity for
/// every kind; severity is monotone in level. Deterministic given the seed
/// (only gaussian-noise consumes randomness).
pub fn apply_distortion(
    image: &RasterImage,
    kind: DistortionKind,
    level: f64,
    seed: u64,
) -> Result<RasterImage, ImageOpsError> {
    if level < 0.0 {
        return Err(ImageOpsError::NegativeLevel(level));
    }
    if level == 0.0 {
        return Ok(image.clone());
    }
    match kind {
        DistortionKind::GaussianBlur => gaussian_blur(image, level),
        DistortionKind::GaussianNoise => additive_noise(image, 5.0 * level, seed),
        DistortionKind::BlockQuantize => {
            block_quantize(image, (level / BLOCK_QUANTIZE_LEVEL_MAX).min(1.0))
        }
    }
}

/// Separable Gaussian blur with sigma = level, replicated edges, kernel
/// radius `ceil(3*sigma)`.
fn gaussian_blur(image: &RasterImage, sigma: f64) -> Result<RasterImage, ImageOpsError> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for k in -radius..=radius {
        kernel.push((-((k * k) as f64) / denom).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let (w, h) = (image.width() as isize, image.height() as isize);
    // Horizontal pass.
    let mut tmp = vec![0.0f32; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3usize {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += kv * image.get(sx as usize, y as usize, c) as f64;
                }
                tmp[((y * w + x) * 3) as usize + c] = acc as f32;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3usize {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[((sy * w + x) * 3) as usize + c] as f64;
                }
                out[((y * w + x) * 3) as usize + c] = acc as f32;
            }
        }
    }
    RasterImage::new(image.width(), image.height(), out)
}

/// Additive zero-mean Gaussian noise, clipped back to `[0, 255]`.
fn additive_noise(image: &RasterImage, sigma: f64, seed: u64) -> Result<RasterImage, ImageOpsError> {
    let mut rng = seeds::rng_from_seed(seed);
    let pixels = image
        .pixels()
        .iter()
        .map(|&p| (p as f64 + sigma * seeds::standard_normal(&mut rng)).clamp(0.0, 255.0) as f32)
        .collect();
    RasterImage::new(image.width(), image.height(), pixels)
}

/// Compression-like artifact: each 8x8 block is blended toward its own mean
/// with blend factor `t` in `[0, 1]`.
fn block_quantize(image: &RasterImage, t: f64) -> Result<RasterImage, ImageOpsError> {
    let (w, h) = (image.width(), image.height());
    let mut pixels = image.pixels().to_vec();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let y_end = (by + 8).min(h);
            let x_end = (bx + 8).min(w);
            let count = ((y_end - by) * (x_end - bx)) as f64;
            let mut means = [0.0f64; 3];
            for y in by..y_end {
                for x in bx..x_end {
                    for (c, m) in means.iter_mut().enumerate() {
                        *m += image.get(x, y, c) as f64;
                    }
                }
            }
            for m in &mut means {
                *m /= count;
            }
            for y in by..y_end {
                for x in bx..x_end {
                    for (c, m) in means.iter().enumerate() {
                        let idx = (y * w + x) * 3 + c;
                        let p = pixels[idx] as f64;
                        pixels[idx] = (p + t * (m - p)) as f32;
                    }
                }
            }
        }
    }
    RasterImage::new(w, h, pixels)
}

/// Load a PNG or BMP image (lossless formats only).
pub fn load_image(path: &Path) -> Result<RasterImage, ImageOpsError> {
    let display = path.display().to_string();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    if ext != "png" && ext != "bmp" {
        return Err(ImageOpsError::UnsupportedFormat { path: display });
    }
    let img = image::open(path).map_err(|source| ImageOpsError::Decode { path: display, source })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.into_raw().into_iter().map(|v| v as f32).collect();
    RasterImage::new(w, h, pixels)
}

/// Write as PNG, rounding pixels to the nearest 8-bit value.
pub fn save_png(image: &RasterImage, path: &Path) -> Result<(), ImageOpsError> {
    let display = path.display().to_string();
    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| v.clamp(0.0, 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("raster buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageOpsError::Encode { path: display, source })
}
