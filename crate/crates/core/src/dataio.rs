//! On-disk formats: point annotations, density-map binaries and dataset
//! manifests.
//!
//! # Annotation files
//!
//! UTF-8 JSON Lines. Each non-blank line is one image record:
//!
//! ```text
//! {"image_id":"ear_0001","width":1024,"height":768,"points":[[12.5,40.0],[18.0,41.25]]}
//! ```
//!
//! Coordinates are continuous pixel positions with the origin at the top-left
//! corner of the top-left pixel; a valid point satisfies `0 <= x < width` and
//! `0 <= y < height`. Lines starting with `#` are comments.
//!
//! # Density-map binaries
//!
//! | offset | size | content                      |
//! |--------|------|------------------------------|
//! | 0      | 4    | magic `DMAP`                 |
//! | 4      | 4    | `u32` version, currently 1   |
//! | 8      | 4    | `u32` height                 |
//! | 12     | 4    | `u32` width                  |
//! | 16     | 4·H·W| `f32` values, row-major      |
//!
//! All integers and floats are little-endian.
//!
//! # Manifests
//!
//! TOML with a `split` tag, a `[summary]` table and an `[[entries]]` array.
//! Entry paths are relative to the manifest's directory. An entry references
//! its kernel count either through a point annotation (`annotation.file` +
//! `annotation.image_id`) or, for derived patch datasets, through a density
//! map whose rounded integral stands in for the count.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::densitymap::DensityMap;
use crate::error::{Error, Result};

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";
pub const DMAP_VERSION: u32 = 1;
pub const DMAP_HEADER_SIZE: usize = 16;

/// Kernel-centre annotations for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointAnnotationSet {
    pub image_id: String,
    #[serde(rename = "width")]
    pub image_width: u32,
    #[serde(rename = "height")]
    pub image_height: u32,
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotationSet {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Validation {
                image_id: self.image_id.clone(),
                message: "image dimensions must be positive".into(),
            });
        }
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        for (i, &(x, y)) in self.points.iter().enumerate() {
            if !(x >= 0.0 && x < w && y >= 0.0 && y < h) {
                return Err(Error::Validation {
                    image_id: self.image_id.clone(),
                    message: format!(
                        "point {i} at ({x}, {y}) outside {}x{}",
                        self.image_width, self.image_height
                    ),
                });
            }
        }
        Ok(())
    }
}

pub fn parse_annotations(reader: impl BufRead, source: &str) -> Result<Vec<PointAnnotationSet>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let set: PointAnnotationSet = serde_json::from_str(trimmed).map_err(|e| Error::Schema {
            locus: format!("{source}:{} (record {})", lineno + 1, out.len() + 1),
            message: e.to_string(),
        })?;
        set.validate()?;
        out.push(set);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<PointAnnotationSet>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(BufReader::new(file), &path.display().to_string())
}

pub fn write_annotations(mut writer: impl Write, sets: &[PointAnnotationSet]) -> std::io::Result<()> {
    for set in sets {
        serde_json::to_writer(&mut writer, set)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_annotations(path: impl AsRef<Path>, sets: &[PointAnnotationSet]) -> Result<()> {
    let path = path.as_ref();
    for s in sets {
        s.validate()?;
    }
    let mut buf = Vec::new();
    write_annotations(&mut buf, sets).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn encode_density_map(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(DMAP_HEADER_SIZE + 4 * map.values().len());
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&DMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_density_map(bytes: &[u8]) -> Result<DensityMap> {
    if bytes.len() < DMAP_HEADER_SIZE {
        return Err(Error::Length {
            expected: DMAP_HEADER_SIZE,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != DMAP_MAGIC {
        return Err(Error::Format(format!(
            "bad density-map magic {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != DMAP_VERSION {
        return Err(Error::Format(format!(
            "unsupported density-map version {version}"
        )));
    }
    let (height, width) = (word(8) as usize, word(12) as usize);
    if height == 0 || width == 0 {
        return Err(Error::Format(format!("empty density map {height}x{width}")));
    }
    let expected = DMAP_HEADER_SIZE + 4 * height * width;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes[DMAP_HEADER_SIZE..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DensityMap::from_values(height, width, values)
}

pub fn save_density_map(path: impl AsRef<Path>, map: &DensityMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_density_map(map)).map_err(|e| Error::io(path, e))
}

pub fn load_density_map(path: impl AsRef<Path>) -> Result<DensityMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_density_map(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRef {
    pub file: String,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<AnnotationRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<String>,
}

/// Per-dataset kernel statistics. `avg_kernels` is kept to two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryStats {
    pub count: usize,
    pub min_kernels: usize,
    pub max_kernels: usize,
    pub avg_kernels: f64,
    pub total_kernels: usize,
}

impl SummaryStats {
    pub fn from_counts(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return Self {
                count: 0,
                min_kernels: 0,
                max_kernels: 0,
                avg_kernels: 0.0,
                total_kernels: 0,
            };
        }
        let total: usize = counts.iter().sum();
        Self {
            count: counts.len(),
            min_kernels: *counts.iter().min().unwrap(),
            max_kernels: *counts.iter().max().unwrap(),
            avg_kernels: round2(total as f64 / counts.len() as f64),
            total_kernels: total,
        }
    }
}

/// Round half away from zero to two decimals.
pub fn round2(v: f64) -> f64 {
    // nudge by a few ulps so values like 192.355 (stored as 192.35499..) round up
    let scaled = v * 100.0;
    let nudged = scaled + scaled.signum() * scaled.abs() * 4.0 * f64::EPSILON;
    nudged.round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: SplitTag,
    pub summary: SummaryStats,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
    /// Directory entry paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Schema {
            locus: path.display().to_string(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Recompute statistics from the entries and compare with the stored table.
    pub fn verify_summary(&self) -> Result<()> {
        let fresh = dataset_stats(self)?;
        if fresh != self.summary {
            return Err(Error::Format(format!(
                "manifest summary {:?} does not match entries {:?}",
                self.summary, fresh
            )));
        }
        Ok(())
    }
}

/// Kernel count for every manifest entry, in entry order.
pub fn entry_counts(manifest: &DatasetManifest) -> Result<Vec<usize>> {
    let mut cache: HashMap<String, HashMap<String, usize>> = HashMap::new();
    let mut counts = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let n = if let Some(ann) = &entry.annotation {
            if !cache.contains_key(&ann.file) {
                let path = manifest.resolve(&ann.file);
                if !path.exists() {
                    return Err(Error::MissingData(format!(
                        "annotation file {} not found",
                        path.display()
                    )));
                }
                let sets = load_annotations(&path)?;
                let by_id = sets
                    .into_iter()
                    .map(|s| (s.image_id, s.points.len()))
                    .collect();
                cache.insert(ann.file.clone(), by_id);
            }
            *cache[&ann.file].get(&ann.image_id).ok_or_else(|| {
                Error::MissingData(format!("image `{}` not in {}", ann.image_id, ann.file))
            })?
        } else if let Some(d) = &entry.density {
            let path = manifest.resolve(d);
            if !path.exists() {
                return Err(Error::MissingData(format!(
                    "density map {} not found",
                    path.display()
                )));
            }
            load_density_map(&path)?.sum().round().max(0.0) as usize
        } else {
            return Err(Error::MissingData(format!(
                "entry {} has neither an annotation nor a density reference",
                entry.image
            )));
        };
        counts.push(n);
    }
    Ok(counts)
}

/// (count, min, max, avg, total) over per-image kernel counts.
pub fn dataset_stats(manifest: &DatasetManifest) -> Result<SummaryStats> {
    Ok(SummaryStats::from_counts(&entry_counts(manifest)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_one_record() {
        let text = r#"{"image_id":"a","width":1024,"height":768,"points":[[1,2],[3.5,4],[1023.9,767.0]]}"#;
        let sets = parse_annotations(text.as_bytes(), "mem").unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].points.len(), 3);
    }

    #[test]
    fn parse_empty_file() {
        assert!(parse_annotations("".as_bytes(), "mem").unwrap().is_empty());
        assert!(parse_annotations("# only a comment\n\n".as_bytes(), "mem").unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_names_image() {
        let text = r#"{"image_id":"ear7","width":1024,"height":768,"points":[[1030,10]]}"#;
        match parse_annotations(text.as_bytes(), "mem") {
            Err(Error::Validation { image_id, .. }) => assert_eq!(image_id, "ear7"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn schema_error_reports_line() {
        let text = "{\"image_id\":\"a\",\"width\":4,\"height\":4,\"points\":[]}\n\n{\"image_id\":\"b\",\"width\":4}\n";
        match parse_annotations(text.as_bytes(), "f.jsonl") {
            Err(Error::Schema { locus, .. }) => assert!(locus.starts_with("f.jsonl:3"), "{locus}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn density_file_size() {
        let m = DensityMap::from_values(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(encode_density_map(&m).len(), DMAP_HEADER_SIZE + 24);
    }

    #[test]
    fn density_bad_magic_and_truncation() {
        let m = DensityMap::from_values(2, 2, vec![0.5; 4]).unwrap();
        let mut bytes = encode_density_map(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_density_map(&bad), Err(Error::Format(_))));
        let mut badv = bytes.clone();
        badv[4] = 9;
        assert!(matches!(decode_density_map(&badv), Err(Error::Format(_))));
        bytes.pop();
        assert!(matches!(decode_density_map(&bytes), Err(Error::Length { .. })));
        assert!(matches!(decode_density_map(b"DM"), Err(Error::Length { .. })));
    }

    #[test]
    fn stats_examples() {
        let s = SummaryStats::from_counts(&[16, 1116]);
        assert_eq!((s.min_kernels, s.max_kernels, s.total_kernels), (16, 1116, 1132));
        let s = SummaryStats::from_counts(&[0]);
        assert_eq!(s, SummaryStats { count: 1, min_kernels: 0, max_kernels: 0, avg_kernels: 0.0, total_kernels: 0 });
        let s = SummaryStats::from_counts(&[10, 20, 30]);
        assert_eq!((s.avg_kernels, s.total_kernels), (20.0, 60));
        assert_eq!(SummaryStats::from_counts(&[1, 2, 2]).avg_kernels, 1.67);
    }

    #[test]
    fn round2_half_up() {
        assert_eq!(round2(192.355_555), 192.36);
        assert_eq!(round2(32000.0 * 541.0 / 90000.0), 192.36);
        assert_eq!(round2(1.005), 1.01);
        assert_eq!(round2(2.0), 2.0);
    }

    #[test]
    fn manifest_stats_resolve_refs() {
        let dir = tempfile::tempdir().unwrap();
        let sets = vec![
            PointAnnotationSet { image_id: "a".into(), image_width: 8, image_height: 8, points: vec![(1.0, 1.0); 3] },
            PointAnnotationSet { image_id: "b".into(), image_width: 8, image_height: 8, points: vec![] },
        ];
        save_annotations(dir.path().join("ann.jsonl"), &sets).unwrap();
        let entries = ["a", "b"]
            .iter()
            .map(|id| ManifestEntry {
                image: format!("{id}.png"),
                annotation: Some(AnnotationRef { file: "ann.jsonl".into(), image_id: id.to_string() }),
                density: None,
            })
            .collect();
        let mut m = DatasetManifest {
            split: SplitTag::Train,
            summary: SummaryStats::from_counts(&[3, 0]),
            entries,
            base_dir: PathBuf::new(),
        };
        m.save(dir.path().join("manifest.toml")).unwrap();
        let loaded = DatasetManifest::load(dir.path().join("manifest.toml")).unwrap();
        loaded.verify_summary().unwrap();
        assert_eq!(dataset_stats(&loaded).unwrap().total_kernels, 3);

        m.base_dir = dir.path().to_path_buf();
        m.entries[1].annotation.as_mut().unwrap().image_id = "zzz".into();
        assert!(matches!(dataset_stats(&m), Err(Error::MissingData(_))));
        m.entries[1].annotation.as_mut().unwrap().file = "nope.jsonl".into();
        assert!(matches!(dataset_stats(&m), Err(Error::MissingData(_))));
    }
}
