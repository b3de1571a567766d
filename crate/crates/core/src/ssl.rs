//! Noisy-student stage: a trained teacher pseudo-labels unlabeled images,
//! each pseudo-labeled image is expanded into noisy copies, and a fresh
//! student trains on batches mixing pseudo-labeled and labeled samples.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_ops, describe, sample_noise_ops, AugmentConfig, Sample};
use crate::dataio::{self, DatasetManifest, ManifestEntry, SplitTag, SummaryStats};
use crate::densitymap::{integrate_count, DensityMap};
use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::raster::Image;
use crate::train::{self, CheckpointPlan, ShuffledIndices, TrainOutcome, TrainingConfig};

pub const PROVENANCE_FILE: &str = "provenance.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    /// Noise applied on top of the source image, `"none"` for originals.
    pub noise: String,
}

#[derive(Clone, Debug)]
pub struct PseudoEntry {
    pub image: Image,
    pub density: DensityMap,
    pub provenance: Provenance,
}

impl PseudoEntry {
    pub fn count(&self) -> f64 {
        self.density.sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoEntry>,
    pub rejected: Vec<Rejection>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub noisy_copies_per_image: usize,
    pub batch_size: usize,
    pub pseudo_per_batch: usize,
    pub labeled_per_batch: usize,
    pub student_iterations: usize,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            noisy_copies_per_image: 30,
            batch_size: 16,
            pseudo_per_batch: 2,
            labeled_per_batch: 14,
            student_iterations: 90_000,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pseudo_per_batch + self.labeled_per_batch != self.batch_size {
            return Err(Error::config(format!(
                "ssl: pseudo_per_batch ({}) + labeled_per_batch ({}) must equal batch_size ({})",
                self.pseudo_per_batch, self.labeled_per_batch, self.batch_size
            )));
        }
        if self.batch_size == 0 || self.noisy_copies_per_image == 0 || self.student_iterations == 0 {
            return Err(Error::config(
                "ssl: batch_size, noisy_copies_per_image and student_iterations must be positive",
            ));
        }
        Ok(())
    }
}

/// Run the teacher over `(id, image)` pairs. Entries whose prediction is not
/// finite are rejected with a diagnostic; negative cells are clamped to zero.
pub fn pseudo_label(teacher: &Network<f32>, unlabeled: &[(String, Image)]) -> Result<PseudoLabeledSet> {
    let mut set = PseudoLabeledSet::default();
    for (id, image) in unlabeled {
        let pred = teacher.forward(image)?;
        if !pred.is_finite() {
            log::warn!("pseudo-label {id}: non-finite teacher output, rejected");
            set.rejected.push(Rejection {
                source_id: id.clone(),
                reason: "non-finite teacher output".into(),
            });
            continue;
        }
        let density = if pred.values().iter().any(|&v| v < 0.0) {
            let vals = pred.values().iter().map(|&v| v.max(0.0)).collect();
            DensityMap::from_values(pred.height(), pred.width(), vals)?
        } else {
            pred
        };
        set.entries.push(PseudoEntry {
            image: image.clone(),
            density,
            provenance: Provenance {
                source_id: id.clone(),
                noise: "none".into(),
            },
        });
    }
    Ok(set)
}

/// Expand every entry into `noisy_copies_per_image` copies, each with a
/// random non-empty set of noise ops. Geometric ops move the pseudo density
/// along with the image.
pub fn make_noisy_copies(
    set: &PseudoLabeledSet,
    config: &SslConfig,
    noise: &AugmentConfig,
) -> Result<PseudoLabeledSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = PseudoLabeledSet {
        entries: Vec::with_capacity(set.len() * config.noisy_copies_per_image),
        rejected: set.rejected.clone(),
    };
    for e in &set.entries {
        let sample = Sample::new(e.image.clone(), e.density.clone())?;
        for _ in 0..config.noisy_copies_per_image {
            let ops = sample_noise_ops(noise, &mut rng);
            let noisy = apply_ops(&sample, &ops, &mut rng);
            out.entries.push(PseudoEntry {
                image: noisy.image,
                density: noisy.density,
                provenance: Provenance {
                    source_id: e.provenance.source_id.clone(),
                    noise: describe(&ops),
                },
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Labeled,
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub pool: Pool,
    pub index: usize,
}

/// Endless stream of mixed batches. Each pool is drawn without replacement
/// and reshuffled once exhausted; items within a batch are shuffled too.
#[derive(Clone, Debug)]
pub struct MixedBatches {
    labeled: ShuffledIndices,
    pseudo: ShuffledIndices,
    n_labeled: usize,
    n_pseudo: usize,
    rng: ChaCha8Rng,
}

impl MixedBatches {
    pub fn new(labeled_len: usize, pseudo_len: usize, config: &SslConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if (labeled_len == 0 && config.labeled_per_batch > 0) || (pseudo_len == 0 && config.pseudo_per_batch > 0) {
            return Err(Error::arg(format!(
                "mixed batches need non-empty pools (labeled {labeled_len}, pseudo {pseudo_len})"
            )));
        }
        Ok(Self {
            labeled: ShuffledIndices::new((0..labeled_len).collect(), seed),
            pseudo: ShuffledIndices::new((0..pseudo_len).collect(), seed.wrapping_add(1)),
            n_labeled: config.labeled_per_batch,
            n_pseudo: config.pseudo_per_batch,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
        })
    }
}

impl Iterator for MixedBatches {
    type Item = Vec<BatchItem>;

    fn next(&mut self) -> Option<Vec<BatchItem>> {
        let mut batch: Vec<BatchItem> = self
            .pseudo
            .take(self.n_pseudo)
            .into_iter()
            .map(|index| BatchItem { pool: Pool::Pseudo, index })
            .chain(
                self.labeled
                    .take(self.n_labeled)
                    .into_iter()
                    .map(|index| BatchItem { pool: Pool::Labeled, index }),
            )
            .collect();
        batch.shuffle(&mut self.rng);
        Some(batch)
    }
}

pub fn mixed_batches(labeled: &[Sample], pseudo: &PseudoLabeledSet, config: &SslConfig, seed: u64) -> Result<MixedBatches> {
    MixedBatches::new(labeled.len(), pseudo.len(), config, seed)
}

/// Train a freshly initialized network on mixed batches. Validation uses a
/// seeded split of the labeled pool, as in teacher training.
pub fn train_student(
    labeled: &[Sample],
    pseudo: &PseudoLabeledSet,
    network: NetworkConfig,
    config: &SslConfig,
    training: &TrainingConfig,
    plan: &CheckpointPlan,
) -> Result<TrainOutcome> {
    config.validate()?;
    let training = TrainingConfig {
        iterations: config.student_iterations,
        batch_size: config.batch_size,
        ..training.clone()
    };
    training.validate()?;
    if labeled.is_empty() {
        return Err(Error::arg("labeled pool is empty"));
    }
    let mut net = Network::build(network)?;
    let (train_idx, val_idx) = train::split_train_val(labeled.len(), training.val_fraction, training.seed);
    let labeled_t = labeled
        .iter()
        .enumerate()
        .map(|(i, s)| train::to_tensor(&net, s, format!("labeled{i}")))
        .collect::<Result<Vec<_>>>()?;
    let pseudo_t = pseudo
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let s = Sample::new(e.image.clone(), e.density.clone())?;
            train::to_tensor(&net, &s, format!("pseudo{i}:{}", e.provenance.source_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stream = MixedBatches::new(train_idx.len(), pseudo.len(), config, training.seed)?;
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &labeled[i]).collect();
    let history = train::run_loop(
        &mut net,
        &training,
        || {
            stream
                .next()
                .expect("endless stream")
                .into_iter()
                .map(|item| match item.pool {
                    Pool::Labeled => {
                        let i = train_idx[item.index];
                        (&labeled_t[i].x, labeled[i].density.values(), labeled_t[i].id.as_str())
                    }
                    Pool::Pseudo => {
                        let t = &pseudo_t[item.index];
                        (&t.x, pseudo.entries[item.index].density.values(), t.id.as_str())
                    }
                })
                .collect()
        },
        &val,
        plan,
    )?;
    Ok(TrainOutcome {
        network: net,
        history,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SidecarRecord {
    Entry {
        image: String,
        source_id: String,
        noise: String,
    },
    Rejected {
        source_id: String,
        reason: String,
    },
}

/// Write images, pseudo densities, a manifest and the provenance sidecar.
pub fn save_pseudo_set(set: &PseudoLabeledSet, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in ["images", "densities"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(set.len());
    let mut counts = Vec::with_capacity(set.len());
    let mut sidecar = String::new();
    for (i, e) in set.entries.iter().enumerate() {
        let image = format!("images/pseudo_{i:06}.png");
        let density = format!("densities/pseudo_{i:06}.dmap");
        e.image.save(dir.join(&image))?;
        dataio::save_density_map(dir.join(&density), &e.density)?;
        counts.push(integrate_count(&e.density, None)?.round().max(0.0) as usize);
        sidecar.push_str(&serde_json::to_string(&SidecarRecord::Entry {
            image: image.clone(),
            source_id: e.provenance.source_id.clone(),
            noise: e.provenance.noise.clone(),
        })
        .expect("plain record"));
        sidecar.push('\n');
        entries.push(ManifestEntry {
            image,
            annotation: None,
            density: Some(density),
        });
    }
    for r in &set.rejected {
        sidecar.push_str(&serde_json::to_string(&SidecarRecord::Rejected {
            source_id: r.source_id.clone(),
            reason: r.reason.clone(),
        })
        .expect("plain record"));
        sidecar.push('\n');
    }
    let path = dir.join(PROVENANCE_FILE);
    std::fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest {
        split: SplitTag::Train,
        summary: SummaryStats::from_counts(&counts),
        entries,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(dir.join(crate::synthgen::MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn load_pseudo_set(dir: impl AsRef<Path>) -> Result<PseudoLabeledSet> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::load(dir.join(crate::synthgen::MANIFEST_FILE))?;
    let path = dir.join(PROVENANCE_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut set = PseudoLabeledSet::default();
    let mut provenance = std::collections::HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SidecarRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            locus: format!("{}:{}", path.display(), n + 1),
            message: e.to_string(),
        })?;
        match rec {
            SidecarRecord::Entry { image, source_id, noise } => {
                provenance.insert(image, Provenance { source_id, noise });
            }
            SidecarRecord::Rejected { source_id, reason } => set.rejected.push(Rejection { source_id, reason }),
        }
    }
    for entry in &manifest.entries {
        let density_rel = entry
            .density
            .as_ref()
            .ok_or_else(|| Error::MissingData(format!("pseudo entry {} has no density", entry.image)))?;
        let provenance = provenance
            .remove(&entry.image)
            .ok_or_else(|| Error::MissingData(format!("no provenance for {}", entry.image)))?;
        let image = Image::load(manifest.resolve(&entry.image))?;
        let density = dataio::load_density_map(manifest.resolve(density_rel))?;
        if density.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation {
                image_id: entry.image.clone(),
                message: "pseudo density must be finite and non-negative".into(),
            });
        }
        set.entries.push(PseudoEntry { image, density, provenance });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densitymap::{generate_density_map, SigmaPolicy};

    fn tiny_entry(id: &str) -> PseudoEntry {
        let density = generate_density_map(12, 10, &[(3.0, 4.0), (8.0, 2.0)], &SigmaPolicy::default()).unwrap();
        PseudoEntry {
            image: Image::new(12, 10, 3),
            density,
            provenance: Provenance {
                source_id: id.into(),
                noise: "none".into(),
            },
        }
    }

    #[test]
    fn config_composition_checked() {
        assert!(SslConfig::default().validate().is_ok());
        let bad = SslConfig { pseudo_per_batch: 3, ..SslConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn copies_multiply_and_keep_provenance() {
        let set = PseudoLabeledSet {
            entries: vec![tiny_entry("a"), tiny_entry("b")],
            rejected: vec![],
        };
        let cfg = SslConfig { noisy_copies_per_image: 5, ..SslConfig::default() };
        let noisy = make_noisy_copies(&set, &cfg, &AugmentConfig::default()).unwrap();
        assert_eq!(noisy.len(), 10);
        for (i, e) in noisy.entries.iter().enumerate() {
            let src = &set.entries[i / 5];
            assert_eq!(e.provenance.source_id, src.provenance.source_id);
            assert_ne!(e.provenance.noise, "none");
            // right-angle rotations and flips only permute cells
            assert!((e.count() - src.count()).abs() < 1e-9);
        }
    }

    #[test]
    fn batches_have_exact_composition() {
        let cfg = SslConfig::default();
        let mut draws = 0;
        for b in MixedBatches::new(50, 7, &cfg, 3).unwrap().take(100) {
            assert_eq!(b.len(), 16);
            let p = b.iter().filter(|i| i.pool == Pool::Pseudo).count();
            assert_eq!(p, 2);
            draws += p;
        }
        assert_eq!(draws, 200);
        assert!(MixedBatches::new(50, 0, &cfg, 3).is_err());
        assert!(MixedBatches::new(0, 5, &cfg, 3).is_err());
    }

    #[test]
    fn zero_pseudo_degenerates_to_labeled_batches() {
        let cfg = SslConfig {
            pseudo_per_batch: 0,
            labeled_per_batch: 16,
            ..SslConfig::default()
        };
        for b in MixedBatches::new(20, 0, &cfg, 1).unwrap().take(10) {
            assert!(b.iter().all(|i| i.pool == Pool::Labeled));
            assert_eq!(b.len(), 16);
        }
    }

    #[test]
    fn persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = PseudoLabeledSet {
            entries: vec![tiny_entry("x")],
            rejected: vec![Rejection {
                source_id: "y".into(),
                reason: "non-finite teacher output".into(),
            }],
        };
        save_pseudo_set(&set, dir.path()).unwrap();
        let back = load_pseudo_set(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.entries[0].provenance, set.entries[0].provenance);
        assert_eq!(back.entries[0].density, set.entries[0].density);
        assert_eq!(back.rejected, set.rejected);
    }
}
