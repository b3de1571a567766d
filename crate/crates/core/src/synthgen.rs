//! Procedural "corn ear" images with exact kernel-centre annotations.
//!
//! Each ear is an elliptical cob; kernels are shaded ellipses placed by dart
//! throwing inside it, so every annotation point is exactly the centre of a
//! drawn kernel. Samples are a pure function of `(seed, sample_index)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    save_annotations, AnnotationRef, DatasetManifest, ManifestEntry, PointAnnotationSet, SplitTag,
    SummaryStats,
};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Dart-throwing attempts allowed per requested kernel.
const ATTEMPTS_PER_KERNEL: usize = 400;
/// Cob area per kernel in units of `min_center_spacing²`.
const AREA_PER_KERNEL: f64 = 1.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Plain,
    Cluttered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub ears_per_image: usize,
    pub kernels_per_ear_range: (usize, usize),
    pub kernel_radius_range: (f64, f64),
    pub kernel_color_palette: Vec<[u8; 3]>,
    pub background_style: BackgroundStyle,
    pub lighting_jitter: f64,
    pub min_center_spacing: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_width: 128,
            image_height: 128,
            ears_per_image: 1,
            kernels_per_ear_range: (30, 90),
            kernel_radius_range: (2.4, 3.4),
            kernel_color_palette: vec![
                [232, 178, 40],
                [245, 205, 80],
                [214, 140, 30],
                [180, 60, 40],
                [236, 226, 196],
            ],
            background_style: BackgroundStyle::Cluttered,
            lighting_jitter: 0.3,
            min_center_spacing: 6.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::config("synth image dimensions must be positive"));
        }
        if self.ears_per_image == 0 {
            return Err(Error::config("synth.ears_per_image must be positive"));
        }
        let (kmin, kmax) = self.kernels_per_ear_range;
        if kmin > kmax {
            return Err(Error::config("synth.kernels_per_ear_range has min > max"));
        }
        let (rmin, rmax) = self.kernel_radius_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::config("synth.kernel_radius_range must satisfy 0 < min <= max"));
        }
        if self.kernel_color_palette.is_empty() {
            return Err(Error::config("synth.kernel_color_palette is empty"));
        }
        if !(0.0..=1.0).contains(&self.lighting_jitter) {
            return Err(Error::config("synth.lighting_jitter must lie in [0, 1]"));
        }
        if !(self.min_center_spacing > 0.0 && self.min_center_spacing.is_finite()) {
            return Err(Error::config("synth.min_center_spacing must be positive"));
        }
        Ok(())
    }

    /// Legal but suspicious settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.min_center_spacing <= 2.0 * self.kernel_radius_range.0 {
            w.push(format!(
                "min_center_spacing {} <= 2 x min kernel radius {}: kernels may overlap",
                self.min_center_spacing, self.kernel_radius_range.0
            ));
        }
        w
    }

    pub fn image_id(&self, sample_index: usize) -> String {
        format!("synth_s{}_{:05}", self.seed, sample_index)
    }
}

struct Ear {
    cx: f64,
    cy: f64,
    /// semi-axis along `angle`
    a: f64,
    b: f64,
    angle: f64,
    kernels: usize,
    color: [f64; 3],
}

impl Ear {
    /// Coordinates in the ear frame, normalized so the cob boundary is 1.
    fn local(&self, x: f64, y: f64, shrink: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / (self.a - shrink), v / (self.b - shrink))
    }

    fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt(),
            ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt(),
        )
    }
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
}

fn layout_ears(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Ear>> {
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let margin = spec.kernel_radius_range.1;
    let mut ears: Vec<Ear> = Vec::new();
    for e in 0..spec.ears_per_image {
        let kernels = rng.gen_range(spec.kernels_per_ear_range.0..=spec.kernels_per_ear_range.1);
        let inner_area = (kernels.max(1) as f64) * spec.min_center_spacing.powi(2) * AREA_PER_KERNEL;
        let color = rgb(spec.kernel_color_palette[rng.gen_range(0..spec.kernel_color_palette.len())]);
        let mut placed = None;
        for attempt in 0..200 {
            // Elongated first, rounder as attempts fail.
            let max_ar = (2.6 - attempt as f64 * 0.01).max(1.0);
            let ar = rng.gen_range(1.0..=max_ar);
            let b_in = (inner_area / (std::f64::consts::PI * ar)).sqrt();
            let ear = Ear {
                cx: 0.0,
                cy: 0.0,
                a: ar * b_in + margin,
                b: b_in + margin,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                kernels,
                color,
            };
            let (hx, hy) = ear.half_extent();
            if 2.0 * hx >= w - 2.0 || 2.0 * hy >= h - 2.0 {
                continue;
            }
            let cx = rng.gen_range(hx + 1.0..w - hx - 1.0);
            let cy = rng.gen_range(hy + 1.0..h - hy - 1.0);
            let clear = ears.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d >= o.b + ear.b
            });
            if clear || attempt >= 150 {
                placed = Some(Ear { cx, cy, ..ear });
                break;
            }
        }
        let ear = placed.ok_or_else(|| {
            Error::Generation(format!(
                "ear {e} with {kernels} kernels at spacing {} does not fit a {}x{} image",
                spec.min_center_spacing, spec.image_width, spec.image_height
            ))
        })?;
        ears.push(ear);
    }
    Ok(ears)
}

/// Spatial hash for spacing checks during dart throwing.
struct SpacingGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<(f64, f64)>>,
}

impl SpacingGrid {
    fn new(w: f64, h: f64, spacing: f64) -> Self {
        let cols = (w / spacing).ceil() as usize + 1;
        let rows = (h / spacing).ceil() as usize + 1;
        Self {
            cell: spacing,
            cols,
            rows,
            buckets: vec![Vec::new(); cols * rows],
        }
    }

    fn fits(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = ((x / self.cell) as isize, (y / self.cell) as isize);
        let s2 = self.cell * self.cell;
        for gy in cy - 1..=cy + 1 {
            for gx in cx - 1..=cx + 1 {
                if gx < 0 || gy < 0 || gx as usize >= self.cols || gy as usize >= self.rows {
                    continue;
                }
                for &(px, py) in &self.buckets[gy as usize * self.cols + gx as usize] {
                    if (px - x).powi(2) + (py - y).powi(2) < s2 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, x: f64, y: f64) {
        let (cx, cy) = ((x / self.cell) as usize, (y / self.cell) as usize);
        self.buckets[cy * self.cols + cx].push((x, y));
    }
}

struct Kernel {
    x: f64,
    y: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    color: [f64; 3],
}

fn place_kernels(spec: &SynthSpec, ears: &[Ear], rng: &mut ChaCha8Rng) -> Result<Vec<Kernel>> {
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let mut grid = SpacingGrid::new(w, h, spec.min_center_spacing);
    let mut kernels = Vec::new();
    let margin = spec.kernel_radius_range.1;
    for (e, ear) in ears.iter().enumerate() {
        let (hx, hy) = ear.half_extent();
        let mut placed = 0;
        let budget = ATTEMPTS_PER_KERNEL * ear.kernels.max(1);
        let mut attempts = 0;
        while placed < ear.kernels {
            if attempts == budget {
                return Err(Error::Generation(format!(
                    "placed only {placed} of {} kernels on ear {e} at min_center_spacing {} after {budget} attempts",
                    ear.kernels, spec.min_center_spacing
                )));
            }
            attempts += 1;
            let x = ear.cx + rng.gen_range(-hx..hx);
            let y = ear.cy + rng.gen_range(-hy..hy);
            if !(x >= 0.0 && x < w && y >= 0.0 && y < h) {
                continue;
            }
            let (u, v) = ear.local(x, y, margin);
            if u * u + v * v > 1.0 || !grid.fits(x, y) {
                continue;
            }
            grid.insert(x, y);
            let r = rng.gen_range(spec.kernel_radius_range.0..=spec.kernel_radius_range.1);
            let jitter = rng.gen_range(0.88..1.12);
            kernels.push(Kernel {
                x,
                y,
                rx: r * rng.gen_range(0.8..1.0),
                ry: r,
                angle: ear.angle + rng.gen_range(-0.3..0.3),
                color: ear.color.map(|c| (c * jitter).min(1.0)),
            });
            placed += 1;
        }
    }
    Ok(kernels)
}

fn paint_background(img: &mut Image, spec: &SynthSpec, rng: &mut ChaCha8Rng) {
    let base = [
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.05..0.35),
    ];
    let (w, h) = (img.width(), img.height());
    for c in 0..3 {
        img.plane_mut(c).iter_mut().for_each(|v| *v = base[c] as f32);
    }
    if spec.background_style == BackgroundStyle::Cluttered {
        let blobs = rng.gen_range(6..14);
        for _ in 0..blobs {
            let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let r = rng.gen_range(4.0..(w.min(h) as f64 / 4.0).max(5.0));
            let col = [rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6)];
            let y0 = (cy - r).floor().max(0.0) as usize;
            let y1 = ((cy + r).ceil() as usize).min(h);
            let x0 = (cx - r).floor().max(0.0) as usize;
            let x1 = ((cx + r).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt() / r;
                    if d < 1.0 {
                        let a = 0.5 * (1.0 - d);
                        for c in 0..3 {
                            let v = img.get(c, y, x) as f64;
                            img.set(c, y, x, (v * (1.0 - a) + col[c] * a) as f32);
                        }
                    }
                }
            }
        }
    }
}

fn paint_cob(img: &mut Image, ear: &Ear) {
    let cob = [0.86, 0.80, 0.66];
    let (hx, hy) = ear.half_extent();
    let (w, h) = (img.width(), img.height());
    let y0 = (ear.cy - hy).floor().max(0.0) as usize;
    let y1 = ((ear.cy + hy).ceil() as usize).min(h);
    let x0 = (ear.cx - hx).floor().max(0.0) as usize;
    let x1 = ((ear.cx + hx).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = ear.local(x as f64 + 0.5, y as f64 + 0.5, 0.0);
            let r = (u * u + v * v).sqrt();
            if r < 1.0 {
                let alpha = ((1.0 - r) * ear.b).clamp(0.0, 1.0);
                let shade = 1.0 - 0.35 * v * v;
                for c in 0..3 {
                    let old = img.get(c, y, x) as f64;
                    img.set(c, y, x, (old * (1.0 - alpha) + cob[c] * shade * alpha) as f32);
                }
            }
        }
    }
}

fn paint_kernel(img: &mut Image, k: &Kernel) {
    let (w, h) = (img.width(), img.height());
    let r = k.rx.max(k.ry) + 1.0;
    let y0 = (k.y - r).floor().max(0.0) as usize;
    let y1 = ((k.y + r).ceil() as usize).min(h);
    let x0 = (k.x - r).floor().max(0.0) as usize;
    let x1 = ((k.x + r).ceil() as usize).min(w);
    let (s, c) = k.angle.sin_cos();
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - k.x, y as f64 + 0.5 - k.y);
            let u = (dx * c + dy * s) / k.rx;
            let v = (-dx * s + dy * c) / k.ry;
            let rn = (u * u + v * v).sqrt();
            if rn >= 1.0 {
                continue;
            }
            let alpha = ((1.0 - rn) * k.rx.min(k.ry)).clamp(0.0, 1.0);
            // darker rim, highlight up-left of centre
            let shade = 1.0 - 0.45 * rn * rn + 0.25 * (-((u + 0.35).powi(2) + (v + 0.35).powi(2)) * 4.0).exp();
            for ch in 0..3 {
                let old = img.get(ch, y, x) as f64;
                let val = (k.color[ch] * shade).min(1.0);
                img.set(ch, y, x, (old * (1.0 - alpha) + val * alpha) as f32);
            }
        }
    }
}

fn apply_lighting(img: &mut Image, jitter: f64, rng: &mut ChaCha8Rng) {
    let gain = 1.0 + jitter * rng.gen_range(-0.5..0.5);
    let gx = jitter * rng.gen_range(-0.3..0.3);
    let gy = jitter * rng.gen_range(-0.3..0.3);
    let tint: [f64; 3] = [
        1.0 + jitter * rng.gen_range(-0.1..0.1),
        1.0 + jitter * rng.gen_range(-0.1..0.1),
        1.0 + jitter * rng.gen_range(-0.1..0.1),
    ];
    let noise = Normal::new(0.0, 0.012).expect("valid normal");
    let (w, h) = (img.width(), img.height());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / w as f64 - 0.5;
                let fy = y as f64 / h as f64 - 0.5;
                let g = gain * tint[c] * (1.0 + gx * fx + gy * fy);
                let v = img.get(c, y, x) as f64 * g + noise.sample(rng);
                img.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Render sample `sample_index` of `spec`.
pub fn generate_sample(spec: &SynthSpec, sample_index: usize) -> Result<(Image, PointAnnotationSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(sample_index as u64);

    let ears = layout_ears(spec, &mut rng)?;
    let kernels = place_kernels(spec, &ears, &mut rng)?;

    let mut img = Image::new(spec.image_width, spec.image_height, 3);
    paint_background(&mut img, spec, &mut rng);
    for ear in &ears {
        paint_cob(&mut img, ear);
    }
    for k in &kernels {
        paint_kernel(&mut img, k);
    }
    apply_lighting(&mut img, spec.lighting_jitter, &mut rng);

    let ann = PointAnnotationSet {
        image_id: spec.image_id(sample_index),
        image_width: spec.image_width as u32,
        image_height: spec.image_height as u32,
        points: kernels.iter().map(|k| (k.x, k.y)).collect(),
    };
    Ok((img, ann))
}

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Write `n_images` samples (PNG + one JSONL annotation file) and a manifest
/// under `out_dir`.
pub fn generate_dataset(
    spec: &SynthSpec,
    n_images: usize,
    out_dir: impl AsRef<Path>,
    split: SplitTag,
) -> Result<DatasetManifest> {
    spec.validate()?;
    for w in spec.warnings() {
        log::warn!("{w}");
    }
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut sets = Vec::with_capacity(n_images);
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (img, ann) = generate_sample(spec, i)?;
        let rel = format!("images/{}.png", ann.image_id);
        img.save(out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            image: rel,
            annotation: Some(AnnotationRef {
                file: ANNOTATION_FILE.into(),
                image_id: ann.image_id.clone(),
            }),
            density: None,
        });
        sets.push(ann);
    }
    save_annotations(out_dir.join(ANNOTATION_FILE), &sets)?;
    let counts: Vec<usize> = sets.iter().map(|s| s.points.len()).collect();
    let manifest = DatasetManifest {
        split,
        summary: SummaryStats::from_counts(&counts),
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let spec = SynthSpec::default();
        let (a, pa) = generate_sample(&spec, 3).unwrap();
        let (b, pb) = generate_sample(&spec, 3).unwrap();
        assert_eq!(a.to_rgb8().into_raw(), b.to_rgb8().into_raw());
        assert_eq!(pa, pb);
        let (c, _) = generate_sample(&spec, 4).unwrap();
        assert_ne!(a.to_rgb8().into_raw(), c.to_rgb8().into_raw());
    }

    #[test]
    fn exact_kernel_count() {
        let spec = SynthSpec {
            kernels_per_ear_range: (50, 50),
            ..SynthSpec::default()
        };
        for i in 0..5 {
            assert_eq!(generate_sample(&spec, i).unwrap().1.points.len(), 50);
        }
    }

    #[test]
    fn spacing_respected_pairwise() {
        let spec = SynthSpec {
            ears_per_image: 2,
            kernels_per_ear_range: (20, 40),
            ..SynthSpec::default()
        };
        for i in 0..6 {
            let (_, ann) = generate_sample(&spec, i).unwrap();
            ann.validate().unwrap();
            let p = &ann.points;
            for a in 0..p.len() {
                for b in a + 1..p.len() {
                    let d = ((p[a].0 - p[b].0).powi(2) + (p[a].1 - p[b].1).powi(2)).sqrt();
                    assert!(d >= spec.min_center_spacing, "pair ({a},{b}) at {d}");
                }
            }
        }
    }

    #[test]
    fn infeasible_packing_is_reported() {
        let spec = SynthSpec {
            image_width: 32,
            image_height: 32,
            kernels_per_ear_range: (400, 400),
            ..SynthSpec::default()
        };
        assert!(matches!(generate_sample(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn spacing_warning() {
        let spec = SynthSpec {
            min_center_spacing: 4.0,
            ..SynthSpec::default()
        };
        assert_eq!(spec.warnings().len(), 1);
        assert!(SynthSpec::default().warnings().is_empty());
    }
}
