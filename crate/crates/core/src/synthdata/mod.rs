//! Synthetic volumetric datasets: bumped ellipsoids in Gaussian noise, their volume
//! files and split manifests, and training-time augmentation.

mod augment;
mod dataset;
mod io;
mod shapes;

pub use augment::{crop, flip, random_crop, random_flip};
pub use dataset::{
    case_files, case_id, locate_manifest, make_dataset, read_manifest, read_sample, write_sample, Dataset, DatasetConfig,
    DatasetManifest, DatasetSplit, MANIFEST_FILE,
};
pub use io::{load_volume, payload_path, read_header, save_volume, Dtype, VolumeData, VolumeHeader, VolumeKind};
pub use shapes::{generate_sample, ShapeSpec, DEFAULT_NOISE, MAX_BUMP, MU_BACKGROUND, MU_FOREGROUND};

use std::path::PathBuf;

use crate::voxelgeom::{BinaryMask, SignedDistanceMap, Volume, VolumeShape};

/// An image with its label and SDM target, all on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub mask: BinaryMask,
    pub sdm: SignedDistanceMap,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("shape-out-of-bounds: center {center:?} with half-extent {half_extent:?} leaves no 1-voxel margin in {shape}")]
    ShapeOutOfBounds {
        half_extent: [f64; 3],
        center: [f64; 3],
        shape: VolumeShape,
    },
    #[error("invalid shape spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed header: {message}", path.display())]
    Header { path: PathBuf, message: String },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape([usize; 3]),
    #[error("unknown element type {0:?} (expected uint8 or float32)")]
    UnknownDtype(String),
    #[error("{}: size mismatch: expected {expected} payload bytes, found {got}", path.display())]
    SizeMismatch { path: PathBuf, expected: usize, got: usize },
    #[error("expected a {expected:?} volume, found {found:?}")]
    KindMismatch { expected: VolumeKind, found: VolumeKind },
    #[error("crop {crop} does not fit in volume {shape}")]
    CropTooLarge { crop: VolumeShape, shape: VolumeShape },
}
