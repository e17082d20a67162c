//! Shape-aware semi-supervised segmentation of 3D volumes.
//!
//! A dual-head encoder-decoder predicts a foreground probability map and a signed
//! distance map (SDM). Labeled volumes supervise both heads; unlabeled volumes are
//! pulled toward the labeled SDM distribution by an adversarial discriminator.

mod fsutil;
pub mod evalmetrics;
pub mod losses;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod voxelgeom;

pub use voxelgeom::{BinaryMask, SignedDistanceMap, Volume, VolumeShape};

/// SplitMix64 mix of a base seed and a stream index, for independent sub-seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
