//! Dataset manifests, splits, resampling and in-memory samples.

mod formats;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use formats::{decode_binary, encode_binary, format_xyz, load_cloud, load_part_labels, parse_xyz, save_cloud, save_part_labels, BINARY_MAGIC, BINARY_VERSION};
pub use synthetic::{generate_synthetic, half_space_parts, ShapeFamily, SyntheticSpec};

use crate::error::{Error, Result};
use crate::points::{farthest_point_sample, PointCloud};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<PathBuf>,
}

/// JSON manifest: `{"classes": [...], "entries": [{"path", "label", "parts"?}]}`.
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { classes, entries, root: root.into() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("manifest lists no classes".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| e.label >= self.classes.len()) {
            return Err(Error::InvalidArgument(format!("{}: label {} out of range for {} classes", e.path.display(), e.label, self.classes.len())));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        Self { classes: self.classes.clone(), entries, root: self.root.clone() }
    }
}

/// Stratified, seeded train/test split. Each class keeps at least one
/// item on each side.
pub fn split_manifest(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (label, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!("class {label} has {} item(s); a split needs at least 2", idx.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |ids: &[usize]| ids.iter().map(|&i| manifest.entries[i].clone()).collect();
    Ok((manifest.with_entries(pick(&train_idx)), manifest.with_entries(pick(&test_idx))))
}

/// Brings a cloud to exactly `n` points: FPS when larger, random repetition
/// when smaller.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot resample to zero points".into()));
    }
    match cloud.len().cmp(&n) {
        std::cmp::Ordering::Equal => Ok(cloud.clone()),
        std::cmp::Ordering::Greater => cloud.select(&farthest_point_sample(cloud.coords(), n)?),
        std::cmp::Ordering::Less => {
            let mut idx: Vec<usize> = (0..cloud.len()).collect();
            idx.extend((cloud.len()..n).map(|_| rng.random_range(0..cloud.len())));
            cloud.select(&idx)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Normalizes and resamples every cloud to `points`. The repetition RNG
    /// of sample `i` depends only on `(seed, i)`.
    pub fn prepared(mut self, points: usize, seed: u64) -> Result<Self> {
        for (i, s) in self.samples.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            s.cloud = resample(&s.cloud, points, &mut rng)?.normalized();
        }
        Ok(self)
    }
}

/// Loads every manifest entry with its optional part labels.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let path = manifest.resolve(&e.path);
        let mut cloud = load_cloud(&path)?;
        if let Some(parts) = &e.parts {
            let labels = load_part_labels(&manifest.resolve(parts))?;
            cloud = PointCloud::with_attributes(cloud.coords().to_vec(), cloud.normals().map(|n| n.to_vec()), Some(labels))?;
        }
        samples.push(Sample { id: e.path.display().to_string(), cloud, label: e.label });
    }
    Ok(Dataset { classes: manifest.classes.clone(), samples })
}

/// Synthetic dataset with label = position in `families`.
pub fn synthetic_dataset(families: &[ShapeFamily], per_class: usize, points: usize, jitter: f64, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(families.len() * per_class);
    for (label, &family) in families.iter().enumerate() {
        let spec = SyntheticSpec { family, points_per_cloud: points, jitter_sigma: jitter, seed };
        for (i, cloud) in generate_synthetic(&spec, per_class)?.into_iter().enumerate() {
            samples.push(Sample { id: format!("{family}_{i:04}"), cloud, label });
        }
    }
    Ok(Dataset { classes: families.iter().map(|f| f.name().to_string()).collect(), samples })
}

/// Writes each sample as a binary cloud under `dir` plus `manifest.json`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let rel = PathBuf::from(format!("{}.p2pc", s.id));
        save_cloud(&dir.join(&rel), &s.cloud)?;
        entries.push(ManifestEntry { path: rel, label: s.label, parts: None });
    }
    let manifest = DatasetManifest::new(dataset.classes.clone(), entries, dir)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
