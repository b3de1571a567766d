//! Training-patch preparation: image pyramids, random patch crops and the
//! photometric/geometric noise recipe, always keeping image and density map
//! paired.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::densitymap::DensityMap;
use crate::error::{Error, Result};
use crate::raster::Image;

/// An image with its (ground-truth or pseudo) density map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub density: DensityMap,
}

impl Sample {
    pub fn new(image: Image, density: DensityMap) -> Result<Self> {
        if image.width() != density.width() || image.height() != density.height() {
            return Err(Error::arg(format!(
                "image {}x{} and density {}x{} differ in size",
                image.width(),
                image.height(),
                density.width(),
                density.height()
            )));
        }
        Ok(Self { image, density })
    }

    pub fn count(&self) -> f64 {
        self.density.sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_step: f64,
    pub patches_per_scale_image: usize,
    pub patch_size: usize,
    /// Fraction of patches that receive noise.
    pub noise_fraction: f64,
    /// Candidate rotations in degrees.
    pub rotation_set: Vec<f64>,
    pub allow_arbitrary_rotation: bool,
    pub noise_stddev: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.4,
            scale_max: 1.6,
            scale_step: 0.1,
            patches_per_scale_image: 80,
            patch_size: 300,
            noise_fraction: 0.4,
            rotation_set: vec![90.0, 180.0, 270.0],
            allow_arbitrary_rotation: false,
            noise_stddev: 0.03,
            brightness_range: (0.7, 1.3),
            contrast_range: (0.7, 1.3),
            seed: 0,
        }
    }
}

fn is_right_angle(deg: f64) -> bool {
    (deg / 90.0 - (deg / 90.0).round()).abs() < 1e-9
}

fn quarter_turns(deg: f64) -> u32 {
    ((deg / 90.0).round() as i64).rem_euclid(4) as u32
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_step > 0.0) {
            return Err(Error::config(
                "augment scales require 0 < scale_min <= scale_max and scale_step > 0",
            ));
        }
        if self.patch_size == 0 {
            return Err(Error::config("augment.patch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::config("augment.noise_fraction must lie in [0, 1]"));
        }
        if !self.allow_arbitrary_rotation {
            if let Some(bad) = self.rotation_set.iter().find(|d| !is_right_angle(**d)) {
                return Err(Error::config(format!(
                    "rotation {bad} is not a multiple of 90 degrees; set allow_arbitrary_rotation"
                )));
            }
        }
        let (blo, bhi) = self.brightness_range;
        let (clo, chi) = self.contrast_range;
        if !(blo > 0.0 && blo <= bhi && clo > 0.0 && clo <= chi) {
            return Err(Error::config(
                "brightness/contrast ranges must be positive with lo <= hi",
            ));
        }
        if !(self.noise_stddev >= 0.0) {
            return Err(Error::config("augment.noise_stddev must be non-negative"));
        }
        Ok(())
    }

    /// Inclusive scale grid, `round((max - min) / step) + 1` entries.
    pub fn scales(&self) -> Vec<f64> {
        let n = ((self.scale_max - self.scale_min) / self.scale_step).round() as usize + 1;
        (0..n).map(|i| self.scale_min + i as f64 * self.scale_step).collect()
    }
}

/// One rescaled copy of the pair per pyramid scale.
pub fn build_pyramid(image: &Image, map: &DensityMap, config: &AugmentConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    if image.width() != map.width() || image.height() != map.height() {
        return Err(Error::arg("image and density map must share dimensions"));
    }
    config
        .scales()
        .into_iter()
        .map(|s| {
            let w = (s * image.width() as f64).round() as usize;
            let h = (s * image.height() as f64).round() as usize;
            if w < 1 || h < 1 {
                return Err(Error::arg(format!(
                    "scale {s:.2} shrinks {}x{} below one pixel",
                    image.width(),
                    image.height()
                )));
            }
            Ok(Sample {
                image: image.resize_bilinear(w, h),
                density: map.resize_mass_preserving(w, h),
            })
        })
        .collect()
}

/// `patches_per_scale_image` random square crops of `patch_size`. Inputs
/// smaller than a patch are zero-padded on the bottom/right first.
pub fn crop_patches(
    image: &Image,
    map: &DensityMap,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    config.validate()?;
    if image.width() != map.width() || image.height() != map.height() {
        return Err(Error::arg("image and density map must share dimensions"));
    }
    let p = config.patch_size;
    let (image, map) = if image.width() < p || image.height() < p {
        (image.pad_to(p, p), map.pad_to(p, p))
    } else {
        (image.clone(), map.clone())
    };
    Ok((0..config.patches_per_scale_image)
        .map(|_| {
            let x0 = rng.gen_range(0..=image.width() - p);
            let y0 = rng.gen_range(0..=image.height() - p);
            Sample {
                image: image.crop(x0, y0, p, p),
                density: map.crop(x0, y0, p, p),
            }
        })
        .collect())
}

/// A single augmentation step.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseOp {
    Rotate(f64),
    FlipHorizontal,
    FlipVertical,
    GaussianNoise(f64),
    BrightnessContrast { brightness: f64, contrast: f64 },
}

impl NoiseOp {
    pub fn is_geometric(&self) -> bool {
        matches!(self, NoiseOp::Rotate(_) | NoiseOp::FlipHorizontal | NoiseOp::FlipVertical)
    }
}

impl fmt::Display for NoiseOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseOp::Rotate(d) => write!(f, "rot{d}"),
            NoiseOp::FlipHorizontal => f.write_str("fliph"),
            NoiseOp::FlipVertical => f.write_str("flipv"),
            NoiseOp::GaussianNoise(s) => write!(f, "gauss{s:.3}"),
            NoiseOp::BrightnessContrast { brightness, contrast } => {
                write!(f, "bc{brightness:.3}/{contrast:.3}")
            }
        }
    }
}

/// Human-readable summary of applied ops, `"none"` when empty.
pub fn describe(ops: &[NoiseOp]) -> String {
    if ops.is_empty() {
        return "none".into();
    }
    ops.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
}

/// Draw a non-empty random subset of the noise kinds. Geometric ops come first.
pub fn sample_noise_ops(config: &AugmentConfig, rng: &mut impl Rng) -> Vec<NoiseOp> {
    let mut kinds: Vec<usize> = (0..4).filter(|_| rng.gen_bool(0.5)).collect();
    if kinds.is_empty() {
        kinds.push(rng.gen_range(0..4));
    }
    kinds
        .into_iter()
        .filter_map(|k| match k {
            0 => config.rotation_set.choose(rng).map(|&d| NoiseOp::Rotate(d)),
            1 => Some(if rng.gen_bool(0.5) {
                NoiseOp::FlipHorizontal
            } else {
                NoiseOp::FlipVertical
            }),
            2 => Some(NoiseOp::GaussianNoise(config.noise_stddev)),
            _ => Some(NoiseOp::BrightnessContrast {
                brightness: rng.gen_range(config.brightness_range.0..=config.brightness_range.1),
                contrast: rng.gen_range(config.contrast_range.0..=config.contrast_range.1),
            }),
        })
        .collect()
}

fn rotate_plane_bilinear(src: &[f32], h: usize, w: usize, degrees: f64) -> Vec<f32> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // inverse rotation, counter-clockwise in image coordinates
            let sx = c * dx - s * dy + cx - 0.5;
            let sy = s * dx + c * dy + cy - 0.5;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let g = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let v = (g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx) * (1.0 - fy)
                + (g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx) * fy;
            out[y * w + x] = v as f32;
        }
    }
    out
}

fn rotate_sample(sample: &Sample, degrees: f64) -> Sample {
    if is_right_angle(degrees) {
        let k = quarter_turns(degrees);
        return Sample {
            image: sample.image.rotate90(k),
            density: sample.density.rotate90(k),
        };
    }
    let (w, h, ch) = (sample.image.width(), sample.image.height(), sample.image.channels());
    let mut data = Vec::with_capacity(w * h * ch);
    for c in 0..ch {
        data.extend(rotate_plane_bilinear(sample.image.plane(c), h, w, degrees));
    }
    let mut dens = rotate_plane_bilinear(sample.density.values(), h, w, degrees);
    let before = sample.density.sum();
    let after: f64 = dens.iter().map(|&v| v as f64).sum();
    if after > 0.0 {
        let f = before / after;
        dens.iter_mut().for_each(|v| *v = (*v as f64 * f) as f32);
    }
    Sample {
        image: Image::from_planar(w, h, ch, data).expect("same shape"),
        density: DensityMap::from_values(h, w, dens).expect("same shape"),
    }
}

/// Apply `ops` in order. Photometric ops never touch the density map.
pub fn apply_ops(sample: &Sample, ops: &[NoiseOp], rng: &mut impl Rng) -> Sample {
    let mut out = sample.clone();
    for op in ops {
        match op {
            NoiseOp::Rotate(d) => out = rotate_sample(&out, *d),
            NoiseOp::FlipHorizontal => {
                out.image = out.image.flip_horizontal();
                out.density = out.density.flip_horizontal();
            }
            NoiseOp::FlipVertical => {
                out.image = out.image.flip_vertical();
                out.density = out.density.flip_vertical();
            }
            NoiseOp::GaussianNoise(sd) => {
                if *sd > 0.0 {
                    let n = Normal::new(0.0, *sd).expect("finite stddev");
                    for v in out.image.data_mut() {
                        *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            NoiseOp::BrightnessContrast { brightness, contrast } => {
                for v in out.image.data_mut() {
                    let adj = ((*v as f64 - 0.5) * contrast + 0.5) * brightness;
                    *v = adj.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    out
}

/// With probability `noise_fraction`, apply a random subset of the noise
/// kinds. Returns the (possibly unchanged) sample and the ops applied.
pub fn apply_noise(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> (Sample, Vec<NoiseOp>) {
    if !rng.gen_bool(config.noise_fraction) {
        return (sample.clone(), Vec::new());
    }
    let ops = sample_noise_ops(config, rng);
    (apply_ops(sample, &ops, rng), ops)
}

/// Full recipe for one labelled image: pyramid, crops at every scale, noise.
pub fn augment_sample(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for scaled in build_pyramid(&sample.image, &sample.density, config)? {
        for patch in crop_patches(&scaled.image, &scaled.density, config, rng)? {
            out.push(apply_noise(&patch, config, rng).0);
        }
    }
    Ok(out)
}

/// Exact patch count `augment_sample` emits for one image.
pub fn patches_per_image(config: &AugmentConfig) -> usize {
    config.scales().len() * config.patches_per_scale_image
}
