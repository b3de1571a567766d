//! Glue between datasets on disk, density generation, augmentation and
//! counting. Used by the command-line frontend and the end-to-end tests.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agronomy::{ear_estimate_both_sides, ear_estimate_single_side, EarCountConfig};
use crate::augment::{augment_sample, AugmentConfig, Sample};
use crate::dataio::{self, DatasetManifest, PointAnnotationSet, SummaryStats};
use crate::densitymap::{generate_density_map, integrate_count, SigmaPolicy};
use crate::error::{Error, Result};
use crate::evaluate::EstimateMode;
use crate::model::Network;
use crate::raster::Image;

/// One dataset entry loaded into memory.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub sample: Sample,
    /// Exact annotated count when points are available, else the density integral.
    pub count: f64,
}

fn annotation_index(
    manifest: &DatasetManifest,
    cache: &mut HashMap<String, HashMap<String, PointAnnotationSet>>,
    file: &str,
) -> Result<()> {
    if !cache.contains_key(file) {
        let path = manifest.resolve(file);
        if !path.exists() {
            return Err(Error::MissingData(format!("annotation file {} not found", path.display())));
        }
        let sets = dataio::load_annotations(&path)?;
        cache.insert(file.to_string(), sets.into_iter().map(|s| (s.image_id.clone(), s)).collect());
    }
    Ok(())
}

/// Load every entry with a density map: the stored one when referenced,
/// otherwise generated from the point annotation under `policy`.
pub fn load_labeled(manifest: &DatasetManifest, policy: &SigmaPolicy) -> Result<Vec<LabeledImage>> {
    let mut cache = HashMap::new();
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let image = Image::load(manifest.resolve(&entry.image))?;
        let (id, density, count) = if let Some(d) = &entry.density {
            let map = dataio::load_density_map(manifest.resolve(d))?;
            let id = entry
                .annotation
                .as_ref()
                .map(|a| a.image_id.clone())
                .unwrap_or_else(|| entry.image.clone());
            let c = map.sum();
            (id, map, c)
        } else if let Some(ann) = &entry.annotation {
            annotation_index(manifest, &mut cache, &ann.file)?;
            let set = cache[&ann.file].get(&ann.image_id).ok_or_else(|| {
                Error::MissingData(format!("image `{}` not in {}", ann.image_id, ann.file))
            })?;
            check_dims(set, &image)?;
            let map = generate_density_map(image.width(), image.height(), &set.points, policy)?;
            (ann.image_id.clone(), map, set.points.len() as f64)
        } else {
            return Err(Error::MissingData(format!(
                "entry {} has neither an annotation nor a density reference",
                entry.image
            )));
        };
        out.push(LabeledImage {
            id,
            sample: Sample::new(image, density)?,
            count,
        });
    }
    Ok(out)
}

fn check_dims(set: &PointAnnotationSet, image: &Image) -> Result<()> {
    if set.image_width as usize != image.width() || set.image_height as usize != image.height() {
        return Err(Error::Validation {
            image_id: set.image_id.clone(),
            message: format!(
                "annotation says {}x{}, image is {}x{}",
                set.image_width,
                set.image_height,
                image.width(),
                image.height()
            ),
        });
    }
    Ok(())
}

/// Generate and store a density map for every annotated entry, returning
/// the manifest with density references filled in. Maps land in
/// `densities/` next to the manifest.
pub fn densify(manifest: &DatasetManifest, policy: &SigmaPolicy) -> Result<DatasetManifest> {
    policy.validate()?;
    let dir = manifest.resolve("densities");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut cache = HashMap::new();
    let mut out = manifest.clone();
    for entry in &mut out.entries {
        let Some(ann) = &entry.annotation else { continue };
        annotation_index(manifest, &mut cache, &ann.file)?;
        let set = cache[&ann.file]
            .get(&ann.image_id)
            .ok_or_else(|| Error::MissingData(format!("image `{}` not in {}", ann.image_id, ann.file)))?;
        set.validate()?;
        let map = generate_density_map(set.image_width as usize, set.image_height as usize, &set.points, policy)?;
        let rel = format!("densities/{}.dmap", ann.image_id);
        dataio::save_density_map(manifest.resolve(&rel), &map)?;
        entry.density = Some(rel);
    }
    Ok(out)
}

/// Augment every sample with a generator seeded from `config.seed`.
pub fn build_patches(samples: &[Sample], config: &AugmentConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for s in samples {
        out.extend(augment_sample(s, config, &mut rng)?);
    }
    Ok(out)
}

/// Write patches as PNG + DMAP pairs with a manifest. Counts in the summary
/// are rounded density integrals.
pub fn save_patches(patches: &[Sample], dir: &Path, split: dataio::SplitTag) -> Result<DatasetManifest> {
    for sub in ["images", "densities"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(patches.len());
    let mut counts = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let image = format!("images/patch_{i:07}.png");
        let density = format!("densities/patch_{i:07}.dmap");
        p.image.save(dir.join(&image))?;
        dataio::save_density_map(dir.join(&density), &p.density)?;
        counts.push(p.count().round().max(0.0) as usize);
        entries.push(dataio::ManifestEntry {
            image,
            annotation: None,
            density: Some(density),
        });
    }
    let manifest = DatasetManifest {
        split,
        summary: SummaryStats::from_counts(&counts),
        entries,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(dir.join(crate::synthgen::MANIFEST_FILE))?;
    Ok(manifest)
}

/// Integral of the predicted density over the whole image.
pub fn raw_count(net: &Network<f32>, image: &Image) -> Result<f64> {
    let map = net.forward(image)?;
    if !map.is_finite() {
        return Err(Error::Numerical("network produced non-finite density".into()));
    }
    integrate_count(&map, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarCount {
    pub front_raw: Option<f64>,
    pub back_raw: Option<f64>,
    pub estimate: f64,
}

/// Whole-ear estimate from raw side counts under `mode`.
pub fn ear_count(
    mode: EstimateMode,
    front_raw: Option<f64>,
    back_raw: Option<f64>,
    config: &EarCountConfig,
) -> Result<EarCount> {
    let need = |v: Option<f64>, side: &str| {
        v.ok_or_else(|| Error::arg(format!("{} mode needs a {side} image", mode.as_str())))
    };
    let estimate = match mode {
        EstimateMode::Frontside => ear_estimate_single_side(need(front_raw, "front")?, config)?,
        EstimateMode::Backside => ear_estimate_single_side(need(back_raw, "back")?, config)?,
        EstimateMode::Bothside => ear_estimate_both_sides(need(front_raw, "front")?, need(back_raw, "back")?)?,
    };
    Ok(EarCount {
        front_raw,
        back_raw,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, SynthSpec, MANIFEST_FILE};

    #[test]
    fn densify_then_load_agree() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            image_width: 64,
            image_height: 64,
            kernels_per_ear_range: (10, 20),
            ..SynthSpec::default()
        };
        generate_dataset(&spec, 3, dir.path(), dataio::SplitTag::Train).unwrap();
        let manifest = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        let direct = load_labeled(&manifest, &SigmaPolicy::default()).unwrap();
        let dense = densify(&manifest, &SigmaPolicy::default()).unwrap();
        let stored = load_labeled(&dense, &SigmaPolicy::default()).unwrap();
        for (a, b) in direct.iter().zip(&stored) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.sample.density, b.sample.density);
            assert!((a.count - b.count).abs() < 1e-3);
        }
    }

    #[test]
    fn ear_modes() {
        let c = EarCountConfig::default();
        let f = ear_count(EstimateMode::Frontside, Some(100.0), None, &c).unwrap();
        assert!((f.estimate - 210.0).abs() < 1e-9);
        let b = ear_count(EstimateMode::Bothside, Some(68.57), Some(108.10), &c).unwrap();
        assert_eq!(b.estimate.round(), 177.0);
        assert!(ear_count(EstimateMode::Backside, Some(1.0), None, &c).is_err());
    }
}
