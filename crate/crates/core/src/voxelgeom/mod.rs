//! Exact volumetric geometry on isotropic voxel grids: distance transforms, signed
//! distance maps, surface extraction and connected components.

mod components;
mod edt;
mod grid;
mod sdm;

pub use components::{connected_components, largest_component, ComponentLabels, Connectivity};
pub use edt::{exact_edt, squared_edt};
pub use grid::{BinaryMask, DistanceField, Grid, SignedDistanceMap, SurfaceVoxelSet, Volume, VolumeShape};
pub use sdm::{boundary_voxels, normalize_sdm, sdm_target, signed_distance_map};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("mask has no foreground voxels")]
    NoForeground,
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape([usize; 3]),
    #[error("grid size mismatch: expected {expected} voxels, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("mask value {0} is not 0 or 1")]
    NonBinary(u8),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(VolumeShape, VolumeShape),
}
