//! Deterministic synthetic dataset generation.
//!
//! Produces procedural texture images, distorts each one at a declared
//! severity level, and writes a manifest whose ground-truth MOS is a fixed
//! monotone decreasing function of the level. Everything derives from the
//! seed, so two runs emit byte-identical images and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::dataset::{DatasetManifest, ImageRecord};
use crate::imageops::{apply_distortion, save_png, DistortionKind, ImageOpsError, RasterImage};
use crate::seeds;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("empty level grid")]
    EmptyLevels,
    #[error("image count must be >= 1")]
    ZeroCount,
    #[error("image size too small: {0}")]
    SizeTooSmall(usize),
    #[error("no distortion kinds given")]
    NoKinds,
    #[error(transparent)]
    Image(#[from] ImageOpsError),
    #[error("failed to create {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// What to generate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub count: usize,
    /// Square image side.
    pub size: usize,
    pub kinds: Vec<DistortionKind>,
    /// Severity grid; level 0 keeps the base image untouched.
    pub levels: Vec<f64>,
    /// MOS of an undistorted image.
    pub base_mos: f64,
    /// MOS drop per unit of level: `mos = base_mos - mos_per_level * level`.
    pub mos_per_level: f64,
    /// Constant reported standard deviation of the subjective scores.
    pub mos_std: f64,
    /// Optional Gaussian jitter applied to the ground-truth MOS itself.
    pub mos_jitter_std: Option<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synth".to_string(),
            count: 200,
            size: 64,
            kinds: vec![DistortionKind::GaussianBlur],
            levels: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            base_mos: 100.0,
            mos_per_level: 20.0,
            mos_std: 5.0,
            mos_jitter_std: None,
        }
    }
}

impl SynthSpec {
    pub fn mos_for_level(&self, level: f64) -> f64 {
        self.base_mos - self.mos_per_level * level
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.levels.is_empty() {
            return Err(SynthError::EmptyLevels);
        }
        if self.count == 0 {
            return Err(SynthError::ZeroCount);
        }
        if self.size < 8 {
            return Err(SynthError::SizeTooSmall(self.size));
        }
        if self.kinds.is_empty() {
            return Err(SynthError::NoKinds);
        }
        Ok(())
    }
}

/// Procedural base image: two octaves of value noise (a fine and a coarse
/// grid, bilinearly upsampled) plus a random linear gradient. The fine
/// octave keeps enough high-frequency energy for blur levels to be
/// distinguishable; the random mix varies content across images.
pub fn base_image(size: usize, seed: u64) -> RasterImage {
    let mut rng = seeds::rng_from_seed(seed);
    let fine_cell = rng.random_range(2..4usize);
    let coarse_cell = rng.random_range(8..17usize);
    let fine_mix = rng.random_range(0.35..0.65f64);
    let fine = value_noise(size, fine_cell, &mut rng);
    let coarse = value_noise(size, coarse_cell, &mut rng);
    // Random gradient direction and per-channel gains.
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let gradient_amp = rng.random_range(10.0..40.0f64);
    let gains = [
        rng.random_range(0.6..1.0f64),
        rng.random_range(0.6..1.0f64),
        rng.random_range(0.6..1.0f64),
    ];
    let offset = rng.random_range(70.0..110.0f64);
    let amp = rng.random_range(50.0..80.0f64);

    let mut pixels = Vec::with_capacity(size * size * 3);
    let (dx, dy) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = fine_mix * fine[y * size + x] + (1.0 - fine_mix) * coarse[y * size + x];
            let g = gradient_amp * ((x as f64 * dx + y as f64 * dy) / size as f64);
            for gain in gains {
                let v = offset + gain * (amp * (t - 0.5) * 2.0 + g);
                pixels.push(v.clamp(3.0, 252.0) as f32);
            }
        }
    }
    RasterImage::new(size, size, pixels).expect("synthetic buffer")
}

/// Value noise in [0, 1]: random lattice values, bilinear upsampling.
fn value_noise(size: usize, cell: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let grid = size / cell + 2;
    let lattice: Vec<f64> = (0..grid * grid).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0.0f64; size * size];
    for y in 0..size {
        let gy = y as f64 / cell as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 / cell as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            let v00 = lattice[y0 * grid + x0];
            let v10 = lattice[y0 * grid + x0 + 1];
            let v01 = lattice[(y0 + 1) * grid + x0];
            let v11 = lattice[(y0 + 1) * grid + x0 + 1];
            let top = v00 + (v10 - v00) * fx;
            let bottom = v01 + (v11 - v01) * fx;
            out[y * size + x] = top + (bottom - top) * fy;
        }
    }
    out
}

/// Generate the dataset under `out_dir` (`images/` plus `manifest.csv` and
/// its sidecar) and return the manifest.
///
/// Image `i` takes kind `kinds[i % kinds]` and level `levels[(i / kinds) %
/// levels]`, so levels are balanced across the set. MOS values are clamped
/// into `[0, 100]` after optional jitter.
pub fn synth_dataset(
    spec: &SynthSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|source| SynthError::Io { path: images_dir.clone(), source })?;

    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let kind = spec.kinds[i % spec.kinds.len()];
        let level = spec.levels[(i / spec.kinds.len()) % spec.levels.len()];
        let id = format!("synth{i:05}");
        let base = base_image(spec.size, seeds::derive_seed(seed, "synth-base", i as u64));
        let distorted =
            apply_distortion(&base, kind, level, seeds::derive_seed(seed, "synth-distort", i as u64))?;
        let rel_path = PathBuf::from("images").join(format!("{id}.png"));
        save_png(&distorted, &out_dir.join(&rel_path))?;

        let mut mos = spec.mos_for_level(level);
        if let Some(jitter) = spec.mos_jitter_std {
            let mut rng =
                seeds::rng_from_seed(seeds::derive_seed(seed, "synth-jitter", i as u64));
            mos += jitter * seeds::standard_normal(&mut rng);
        }
        mos = mos.clamp(0.0, 100.0);
        records.push(ImageRecord {
            id,
            path: rel_path,
            mos,
            mos_std: Some(spec.mos_std),
            ref_group: None,
        });
    }
    let manifest = DatasetManifest::new(spec.name.clone(), 0.0, 100.0, records)?;
    crate::dataset::write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
