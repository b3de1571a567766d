//! Ground-truth density maps from point annotations, count integration and
//! density thresholding.
//!
//! Every annotated kernel contributes one 2-D Gaussian whose width adapts to
//! the local annotation spacing: `sigma = beta * mean(d_1..d_k)` over the `k`
//! nearest other annotations. Each Gaussian is truncated at `4 sigma`, clipped
//! to the image and renormalized to unit in-bounds mass, so a map built from
//! `M` points integrates to `M` regardless of how close points sit to the
//! border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Image};

/// Truncation radius of each Gaussian, in units of its sigma.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Geometry-adaptive sigma rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaPolicy {
    /// Number of nearest neighbours averaged.
    pub k: usize,
    /// Scale applied to the mean neighbour distance.
    pub beta: f64,
    /// Sigma in pixels when fewer than `k` other points exist.
    pub fallback_sigma: f64,
    /// Upper clamp in pixels.
    pub max_sigma: f64,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        Self {
            k: 3,
            beta: 0.3,
            fallback_sigma: 15.0,
            max_sigma: 50.0,
        }
    }
}

impl SigmaPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("sigma.k must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("sigma.beta must be positive"));
        }
        if !(self.fallback_sigma > 0.0 && self.fallback_sigma <= self.max_sigma)
            || !self.max_sigma.is_finite()
        {
            return Err(Error::config(
                "sigma policy requires 0 < fallback_sigma <= max_sigma",
            ));
        }
        Ok(())
    }
}

/// A non-negative H×W density grid, row-major. Its sum is an object count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!(
                "density map dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::arg(format!(
                "density map holds {} values, expected {}",
                values.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Total mass, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0f32, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Self {
            height,
            width,
            values: raster::crop_plane(&self.values, self.width, x0, y0, width, height),
        }
    }

    pub fn pad_to(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width.max(self.width), height.max(self.height));
        Self {
            height: h,
            width: w,
            values: raster::pad_plane(&self.values, self.height, self.width, h, w),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            values: raster::flip_h_plane(&self.values, self.height, self.width),
            ..*self
        }
    }

    pub fn flip_vertical(&self) -> Self {
        Self {
            values: raster::flip_v_plane(&self.values, self.height, self.width),
            ..*self
        }
    }

    pub fn rotate90(&self, quarter_turns: u32) -> Self {
        let (h, w) = raster::rotated_dims(self.height, self.width, quarter_turns);
        Self {
            height: h,
            width: w,
            values: raster::rot90_plane(&self.values, self.height, self.width, quarter_turns),
        }
    }

    /// Bilinear resize followed by a global rescale so the total mass is kept.
    pub fn resize_mass_preserving(&self, width: usize, height: usize) -> Self {
        let mut values = raster::resize_plane(&self.values, self.height, self.width, height, width);
        let original = self.sum();
        let resized: f64 = values.iter().map(|&v| v as f64).sum();
        if resized > 0.0 {
            let factor = original / resized;
            for v in &mut values {
                *v = (*v as f64 * factor) as f32;
            }
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        Self {
            height,
            width,
            values,
        }
    }
}

/// Axis-aligned pixel rectangle `[x, x + width) × [y, y + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Sigma for `points[index]` under `policy`.
pub fn adaptive_sigma(points: &[(f64, f64)], index: usize, policy: &SigmaPolicy) -> Result<f64> {
    let &(px, py) = points.get(index).ok_or_else(|| {
        Error::arg(format!(
            "point index {index} out of range for {} points",
            points.len()
        ))
    })?;
    if points.len() - 1 < policy.k {
        return Ok(policy.fallback_sigma);
    }
    let mut dists: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != index)
        .map(|(_, &(x, y))| ((x - px).powi(2) + (y - py).powi(2)).sqrt())
        .collect();
    let k = policy.k;
    dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    let nearest = &mut dists[..k];
    nearest.sort_by(|a, b| a.total_cmp(b));
    let mean = nearest.iter().sum::<f64>() / k as f64;
    Ok((policy.beta * mean).min(policy.max_sigma))
}

fn check_points(width: usize, height: usize, points: &[(f64, f64)]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::arg("density map dimensions must be positive"));
    }
    for (i, &(x, y)) in points.iter().enumerate() {
        if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
            return Err(Error::Validation {
                image_id: String::from("<density>"),
                message: format!("point {i} at ({x}, {y}) outside {width}x{height}"),
            });
        }
    }
    Ok(())
}

/// Unit-mass in-bounds Gaussian weights for one axis, indexed from `start`.
fn axis_weights(center: f64, sigma: f64, len: usize) -> (usize, Vec<f64>) {
    let radius = (TRUNCATE_SIGMAS * sigma).ceil();
    let lo = (center - radius).floor().max(0.0) as usize;
    let hi = ((center + radius).ceil() as usize).min(len - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let w = (lo..=hi)
        .map(|i| {
            let d = i as f64 + 0.5 - center;
            (-d * d * inv).exp()
        })
        .collect();
    (lo, w)
}

/// Sum of per-point Gaussians, each renormalized to unit in-bounds mass.
pub fn generate_density_map(
    width: usize,
    height: usize,
    points: &[(f64, f64)],
    policy: &SigmaPolicy,
) -> Result<DensityMap> {
    policy.validate()?;
    check_points(width, height, points)?;
    let mut acc = vec![0.0f64; width * height];
    for i in 0..points.len() {
        let sigma = adaptive_sigma(points, i, policy)?;
        splat_gaussian(&mut acc, width, height, points[i], sigma);
    }
    let values = acc.into_iter().map(|v| v as f32).collect();
    DensityMap::from_values(height, width, values)
}

pub(crate) fn splat_gaussian(acc: &mut [f64], width: usize, height: usize, p: (f64, f64), sigma: f64) {
    let (x, y) = p;
    let (x0, wx) = axis_weights(x, sigma, width);
    let (y0, wy) = axis_weights(y, sigma, height);
    let total: f64 = wx.iter().sum::<f64>() * wy.iter().sum::<f64>();
    if !(total > 0.0 && total.is_finite()) {
        // sigma far below a pixel: the Gaussian collapses onto its pixel
        acc[y.floor() as usize * width + x.floor() as usize] += 1.0;
        return;
    }
    let norm = 1.0 / total;
    for (dy, gy) in wy.iter().enumerate() {
        let row = &mut acc[(y0 + dy) * width..(y0 + dy + 1) * width];
        for (dx, gx) in wx.iter().enumerate() {
            row[x0 + dx] += gx * gy * norm;
        }
    }
}

/// Sum of density over `region`, or over the whole map.
pub fn integrate_count(map: &DensityMap, region: Option<Rect>) -> Result<f64> {
    let Some(r) = region else {
        return Ok(map.sum());
    };
    if r.x + r.width > map.width || r.y + r.height > map.height {
        return Err(Error::arg(format!(
            "region {r:?} exceeds map bounds {}x{}",
            map.width, map.height
        )));
    }
    let mut total = 0.0f64;
    for y in r.y..r.y + r.height {
        total += map.values[y * map.width + r.x..y * map.width + r.x + r.width]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>();
    }
    Ok(total)
}

/// Binary segmentation mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Threshold used when none is given: a tiny fraction of the peak density.
pub fn default_threshold(map: &DensityMap) -> f32 {
    1e-4 * map.max()
}

/// `mask = map > tau`; the overlay keeps masked pixels and zeroes the rest.
pub fn segment(map: &DensityMap, image: &Image, tau: f32) -> Result<(Mask, Image)> {
    if map.width != image.width() || map.height != image.height() {
        return Err(Error::arg(format!(
            "map is {}x{} but image is {}x{}",
            map.width,
            map.height,
            image.width(),
            image.height()
        )));
    }
    if !(tau >= 0.0) {
        return Err(Error::arg("segmentation threshold must be non-negative"));
    }
    let bits: Vec<bool> = map.values.iter().map(|&v| v > tau).collect();
    let mut overlay = image.clone();
    let n = map.width * map.height;
    for c in 0..overlay.channels() {
        for (v, &keep) in overlay.plane_mut(c).iter_mut().zip(&bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    debug_assert_eq!(bits.len(), n);
    Ok((
        Mask {
            width: map.width,
            height: map.height,
            bits,
        },
        overlay,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(beta: f64, k: usize) -> SigmaPolicy {
        SigmaPolicy {
            k,
            beta,
            ..SigmaPolicy::default()
        }
    }

    #[test]
    fn sigma_two_points_ten_apart() {
        let pts = [(10.0, 10.0), (20.0, 10.0)];
        let s = adaptive_sigma(&pts, 0, &policy(0.3, 1)).unwrap();
        assert!((s - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_single_point_uses_fallback() {
        let p = SigmaPolicy::default();
        assert_eq!(adaptive_sigma(&[(5.0, 5.0)], 0, &p).unwrap(), p.fallback_sigma);
    }

    #[test]
    fn sigma_index_out_of_range() {
        assert!(matches!(
            adaptive_sigma(&[(1.0, 1.0)], 1, &SigmaPolicy::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sigma_clamped_at_max() {
        let pts = [(0.0, 0.0), (500.0, 0.0)];
        let p = policy(0.3, 1);
        assert_eq!(adaptive_sigma(&pts, 0, &p).unwrap(), p.max_sigma);
    }

    #[test]
    fn grid_interior_point_sigma() {
        // brute-force k-NN over a 5x5 grid with spacing 8
        let pts: Vec<(f64, f64)> = (0..5)
            .flat_map(|r| (0..5).map(move |c| (4.0 + 8.0 * c as f64, 4.0 + 8.0 * r as f64)))
            .collect();
        let center = 12;
        let mut d: Vec<f64> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != center)
            .map(|(_, p)| ((p.0 - pts[center].0).powi(2) + (p.1 - pts[center].1).powi(2)).sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        assert_eq!(&d[..3], &[8.0, 8.0, 8.0]);
        let s = adaptive_sigma(&pts, center, &policy(0.3, 3)).unwrap();
        assert!((s - 2.4).abs() < 1e-12);
    }

    #[test]
    fn empty_point_set_gives_zero_map() {
        let m = generate_density_map(16, 8, &[], &SigmaPolicy::default()).unwrap();
        assert_eq!(m.sum(), 0.0);
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_centered_point_has_unit_mass() {
        for sigma in [0.2, 1.0, 7.5, 40.0] {
            let p = SigmaPolicy {
                fallback_sigma: sigma,
                max_sigma: 50.0,
                ..SigmaPolicy::default()
            };
            let m = generate_density_map(64, 48, &[(32.0, 24.0)], &p).unwrap();
            assert!((m.sum() - 1.0).abs() < 1e-6, "sigma {sigma}: {}", m.sum());
        }
    }

    #[test]
    fn coincident_points_keep_mass() {
        let pts = [(3.3, 4.4); 5];
        let m = generate_density_map(10, 10, &pts, &SigmaPolicy::default()).unwrap();
        assert!((m.sum() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        let err = generate_density_map(10, 10, &[(10.0, 2.0)], &SigmaPolicy::default());
        assert!(matches!(err, Err(Error::Validation { .. })));
    }

    #[test]
    fn region_integration_is_additive() {
        let pts = [(3.0, 4.0), (12.5, 6.0), (8.0, 8.0)];
        let m = generate_density_map(20, 12, &pts, &SigmaPolicy::default()).unwrap();
        let left = integrate_count(&m, Some(Rect { x: 0, y: 0, width: 9, height: 12 })).unwrap();
        let right = integrate_count(&m, Some(Rect { x: 9, y: 0, width: 11, height: 12 })).unwrap();
        let whole = integrate_count(&m, None).unwrap();
        // Same f32 cells, summed in f64 in a different grouping.
        assert!((left + right - whole).abs() < 1e-12);
        assert!(integrate_count(&m, Some(Rect { x: 15, y: 0, width: 6, height: 1 })).is_err());
    }

    #[test]
    fn zero_map_integrates_to_zero() {
        assert_eq!(integrate_count(&DensityMap::zeros(4, 4), None).unwrap(), 0.0);
    }

    #[test]
    fn segmentation_edge_cases() {
        let img = Image::new(8, 8, 3);
        let zero = DensityMap::zeros(8, 8);
        let (mask, _) = segment(&zero, &img, 0.0).unwrap();
        assert_eq!(mask.count(), 0);

        let m = generate_density_map(8, 8, &[(4.0, 4.0)], &SigmaPolicy::default()).unwrap();
        let (mask, _) = segment(&m, &img, m.max() + 1.0).unwrap();
        assert_eq!(mask.count(), 0);

        assert!(segment(&m, &Image::new(8, 7, 3), 0.0).is_err());
    }

    #[test]
    fn segmentation_half_peak_is_a_disk() {
        let p = SigmaPolicy {
            fallback_sigma: 3.0,
            ..SigmaPolicy::default()
        };
        let m = generate_density_map(32, 32, &[(16.0, 16.0)], &p).unwrap();
        let mut img = Image::new(32, 32, 3);
        img.data_mut().iter_mut().for_each(|v| *v = 0.5);
        let tau = m.max() / 2.0;
        let (mask, overlay) = segment(&m, &img, tau).unwrap();
        // Brute-force superlevel set of the unnormalized Gaussian at pixel centres.
        let g = |x: usize, y: usize| {
            let d2 = (x as f64 + 0.5 - 16.0).powi(2) + (y as f64 + 0.5 - 16.0).powi(2);
            (-d2 / 18.0).exp()
        };
        let peak = (0..32).flat_map(|y| (0..32).map(move |x| g(x, y))).fold(0.0, f64::max);
        for y in 0..32 {
            for x in 0..32 {
                let rel = g(x, y) / peak;
                if (rel - 0.5).abs() > 1e-3 {
                    assert_eq!(mask.get(y, x), rel > 0.5, "pixel ({x},{y})");
                }
                let expect = if mask.get(y, x) { 0.5 } else { 0.0 };
                assert_eq!(overlay.get(0, y, x), expect);
            }
        }
        // connected, centred blob
        assert!(mask.get(16, 16) && mask.get(15, 15));
        assert!(!mask.get(0, 0));
        assert!(mask.count() > 0);
    }

    #[test]
    fn mass_preserving_resize() {
        let pts = [(3.0, 4.0), (12.5, 6.0), (8.0, 8.0)];
        let m = generate_density_map(20, 12, &pts, &SigmaPolicy::default()).unwrap();
        for (w, h) in [(8, 5), (20, 12), (33, 19)] {
            let r = m.resize_mass_preserving(w, h);
            assert!((r.sum() - m.sum()).abs() < 1e-4);
        }
    }
}
