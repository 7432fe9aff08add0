//! Seeded datasets on disk: one cloud file per shape plus `manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stn_core::PointCloud;

use crate::error::{io_err, DataError, Result};
use crate::io::{read_cloud, write_cloud};
use crate::shapes::{gen_shape, Augment, ShapeKind};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(DataError::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kinds: Vec<ShapeKind>,
    pub per_kind: usize,
    pub n_points: usize,
    pub seed: u64,
    pub augment: Augment,
    /// Train and val fractions; test takes the rest.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kinds: ShapeKind::ALL.to_vec(),
            per_kind: 100,
            n_points: 512,
            seed: 0,
            augment: Augment::Rigid,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidArgument(m));
        if self.kinds.is_empty() {
            return bad("at least one shape kind is required".into());
        }
        if self.per_kind == 0 {
            return bad("per_kind must be positive".into());
        }
        let fr = [self.train_frac, self.val_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || self.train_frac + self.val_frac > 1.0 {
            return bad(format!(
                "split fractions {} / {} must lie in [0, 1] and sum to at most 1",
                self.train_frac, self.val_frac
            ));
        }
        let mut kinds = self.kinds.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.kinds.len() {
            return bad("shape kinds must be distinct".into());
        }
        Ok(())
    }

    /// Per-kind split sizes `(train, val, test)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = (self.per_kind as f64 * self.train_frac).round() as usize;
        let val = ((self.per_kind as f64 * self.val_frac).round() as usize).min(self.per_kind - train);
        (train, val, self.per_kind - train - val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub path: String,
    pub split: Split,
    pub kind: ShapeKind,
    pub category: usize,
    pub parts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub cloud: PointCloud,
}

impl Sample {
    pub fn kind(&self) -> ShapeKind {
        self.entry.kind
    }

    /// Per-point labels in this kind's own part numbering.
    pub fn labels(&self) -> &[usize] {
        self.cloud.part_labels().expect("dataset clouds are labelled")
    }

    /// Labels shifted into the label space shared by every kind.
    pub fn global_labels(&self) -> Vec<usize> {
        let off = self.kind().label_offset();
        self.labels().iter().map(|l| l + off).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.entry.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Seed of shape `index` of `kind`: a SplitMix64 step over the triple.
fn shape_seed(seed: u64, kind: ShapeKind, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((kind.index() as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates every shape in memory with a stratified split.
pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let (train, val, _) = config.split_sizes();
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut samples = Vec::with_capacity(config.kinds.len() * config.per_kind);
    for &kind in &config.kinds {
        let mut order: Vec<usize> = (0..config.per_kind).collect();
        order.shuffle(&mut split_rng);
        let mut split_of = vec![Split::Test; config.per_kind];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, &split) in split_of.iter().enumerate() {
            let seed = shape_seed(config.seed, kind, i);
            let cloud = gen_shape(kind, config.n_points, seed, config.augment)?;
            samples.push(Sample {
                entry: ManifestEntry {
                    path: format!("clouds/{}_{i:04}.txt", kind.name()),
                    split,
                    kind,
                    category: kind.index(),
                    parts: kind.parts(),
                    seed,
                },
                cloud,
            });
        }
    }
    let manifest = Manifest {
        config: config.clone(),
        entries: samples.iter().map(|s| s.entry.clone()).collect(),
    };
    Ok(Dataset { manifest, samples })
}

/// Writes `dataset` under `root`: cloud files and `manifest.json`.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let clouds = root.join("clouds");
    std::fs::create_dir_all(&clouds).map_err(io_err(&clouds))?;
    for s in &dataset.samples {
        write_cloud(&root.join(&s.entry.path), &s.cloud, Some(s.entry.parts))?;
    }
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    let path = root.join(MANIFEST);
    std::fs::write(&path, json + "\n").map_err(io_err(path))
}

/// Generates and writes a dataset; returns it for immediate use.
pub fn make_dataset(config: &DatasetConfig, root: &Path) -> Result<Dataset> {
    let ds = generate(config)?;
    write_dataset(&ds, root)?;
    Ok(ds)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let file = read_cloud(&root.join(&entry.path))?;
        if file.cloud.category() != Some(entry.category) || file.cloud.part_labels().is_none() {
            return Err(DataError::Manifest(format!(
                "{} does not match its manifest entry (category or labels missing)",
                entry.path
            )));
        }
        samples.push(Sample {
            entry: entry.clone(),
            cloud: file.cloud,
        });
    }
    Ok(Dataset { manifest, samples })
}

/// Number of shapes per split.
pub fn split_counts(dataset: &Dataset) -> BTreeMap<Split, usize> {
    let mut m = BTreeMap::new();
    for s in &dataset.samples {
        *m.entry(s.entry.split).or_insert(0) += 1;
    }
    m
}

