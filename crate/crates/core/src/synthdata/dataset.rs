use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_volume, save_volume, VolumeData};
use super::shapes::{generate_sample, ShapeSpec, DEFAULT_NOISE};
use super::{Sample, SynthError};
use crate::derive_seed;
use crate::fsutil::write_atomic;
use crate::voxelgeom::VolumeShape;

pub const MANIFEST_FILE: &str = "split.json";

/// Disjoint labeled / unlabeled / validation id lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.labeled_ids.is_empty() {
            return Err(SynthError::InvalidSplit("at least one labeled volume is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.labeled_ids.iter().chain(&self.unlabeled_ids).chain(&self.val_ids) {
            if !seen.insert(id) {
                return Err(SynthError::InvalidSplit(format!("id {id} appears in more than one list")));
            }
        }
        Ok(())
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.labeled_ids.iter().chain(&self.unlabeled_ids).chain(&self.val_ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub shape: VolumeShape,
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(count: usize, shape: VolumeShape, split: (usize, usize, usize), seed: u64) -> Self {
        Self {
            count,
            shape,
            labeled: split.0,
            unlabeled: split.1,
            val: split.2,
            noise_level: DEFAULT_NOISE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.labeled + self.unlabeled + self.val != self.count {
            return Err(SynthError::InvalidSplit(format!(
                "labeled + unlabeled + val = {} + {} + {} does not equal count {}",
                self.labeled, self.unlabeled, self.val, self.count
            )));
        }
        if self.labeled == 0 {
            return Err(SynthError::InvalidSplit("at least one labeled volume is required".into()));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(SynthError::InvalidSpec(format!("noise level must be non-negative, got {}", self.noise_level)));
        }
        Ok(())
    }
}

/// On-disk description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    #[serde(flatten)]
    pub split: DatasetSplit,
    pub specs: BTreeMap<String, ShapeSpec>,
}

pub fn case_id(i: usize) -> String {
    format!("case{i:03}")
}

/// File paths of the three grids of a case, relative to the dataset root.
pub fn case_files(root: &Path, id: &str) -> [PathBuf; 3] {
    ["image", "mask", "sdm"].map(|kind| root.join(format!("{id}_{kind}.json")))
}

/// The shape and noise seed used for case `i`.
fn case_recipe(config: &DatasetConfig, i: usize) -> (ShapeSpec, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2 * i as u64));
    (ShapeSpec::random(config.shape, &mut rng), derive_seed(config.seed, 2 * i as u64 + 1))
}

/// Generates `config.count` cases, writes their file triples and `split.json` into `out_dir`.
pub fn make_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut specs = BTreeMap::new();
    for i in 0..config.count {
        let id = case_id(i);
        let (spec, noise_seed) = case_recipe(config, i);
        let sample = generate_sample(&id, &spec, config.shape, config.noise_level, noise_seed)?;
        write_sample(out_dir, &sample)?;
        specs.insert(id, spec);
    }

    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX)));
    let pick = |range: std::ops::Range<usize>| {
        let mut ids: Vec<usize> = order[range].to_vec();
        ids.sort_unstable();
        ids.into_iter().map(case_id).collect::<Vec<_>>()
    };
    let (n, m) = (config.labeled, config.unlabeled);
    let split = DatasetSplit {
        labeled_ids: pick(0..n),
        unlabeled_ids: pick(n..n + m),
        val_ids: pick(n + m..config.count),
    };
    let manifest = DatasetManifest {
        config: config.clone(),
        split,
        specs,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&path, &json).map_err(|source| SynthError::Io { path, source })?;
    Ok(manifest)
}

pub fn write_sample(root: &Path, sample: &Sample) -> Result<(), SynthError> {
    let [image, mask, sdm] = case_files(root, &sample.id);
    save_volume(&image, &sample.id, &VolumeData::Image(sample.volume.clone()))?;
    save_volume(&mask, &sample.id, &VolumeData::Mask(sample.mask.clone()))?;
    save_volume(&sdm, &sample.id, &VolumeData::Sdm(sample.sdm.clone()))?;
    Ok(())
}

pub fn read_sample(root: &Path, id: &str) -> Result<Sample, SynthError> {
    let [image, mask, sdm] = case_files(root, id);
    let volume = load_volume(&image)?.1.into_image()?;
    let mask = load_volume(&mask)?.1.into_mask()?;
    let sdm = load_volume(&sdm)?.1.into_sdm()?;
    if volume.shape() != mask.shape() || mask.shape() != sdm.shape {
        return Err(SynthError::Header {
            path: root.join(id),
            message: "image, mask and sdm shapes differ".into(),
        });
    }
    Ok(Sample {
        id: id.to_string(),
        volume,
        mask,
        sdm,
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| SynthError::Header {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    manifest.split.validate()?;
    Ok(manifest)
}

/// Dataset root and manifest file for a path naming either of them.
pub fn locate_manifest(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    }
}

/// A manifest with every referenced case loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: BTreeMap<String, Sample>,
}

impl Dataset {
    /// `path` is either the manifest file or the directory holding it.
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let (root, manifest_path) = locate_manifest(path);
        let manifest = read_manifest(&manifest_path)?;
        let mut samples = BTreeMap::new();
        for id in manifest.split.all_ids() {
            samples.insert(id.clone(), read_sample(&root, id)?);
        }
        Ok(Self {
            root,
            manifest,
            samples,
        })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.manifest.split
    }

    pub fn sample(&self, id: &str) -> &Sample {
        &self.samples[id]
    }
}
