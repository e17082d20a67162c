use rand::Rng;

use super::{Sample, SynthError};
use crate::voxelgeom::{sdm_target, Grid, SignedDistanceMap, VolumeShape};

/// Crops all three grids to the same box. The SDM is recomputed from the cropped
/// mask: distances measured to surface outside the box are no longer valid.
pub fn crop(sample: &Sample, origin: [usize; 3], extent: VolumeShape) -> Result<Sample, SynthError> {
    let outer = sample.volume.shape();
    let fits = (0..3).all(|i| origin[i] + extent.dims()[i] <= outer.dims()[i]);
    if !fits {
        return Err(SynthError::CropTooLarge { crop: extent, shape: outer });
    }
    let mask = sample.mask.crop(origin, extent);
    Ok(Sample {
        id: sample.id.clone(),
        volume: sample.volume.crop(origin, extent),
        sdm: sdm_target(&mask),
        mask,
    })
}

/// Crop at a uniformly drawn origin.
pub fn random_crop(sample: &Sample, extent: VolumeShape, rng: &mut impl Rng) -> Result<Sample, SynthError> {
    let outer = sample.volume.shape();
    if !extent.fits_within(&outer) {
        return Err(SynthError::CropTooLarge { crop: extent, shape: outer });
    }
    let origin = std::array::from_fn(|i| rng.gen_range(0..=outer.dims()[i] - extent.dims()[i]));
    crop(sample, origin, extent)
}

/// Mirrors all three grids along `axis`. Reflection preserves Euclidean distances,
/// so the SDM is flipped rather than recomputed.
pub fn flip(sample: &Sample, axis: usize) -> Sample {
    assert!(axis < 3, "axis must be 0, 1 or 2");
    let sdm_grid = Grid::from_vec(sample.sdm.shape, sample.sdm.values.clone()).expect("sdm length matches shape");
    Sample {
        id: sample.id.clone(),
        volume: sample.volume.flip(axis),
        mask: sample.mask.flip(axis),
        sdm: SignedDistanceMap {
            values: sdm_grid.flip(axis).into_vec(),
            ..sample.sdm.clone()
        },
    }
}

/// Flips along `axis` with probability 1/2.
pub fn random_flip(sample: &Sample, axis: usize, rng: &mut impl Rng) -> Sample {
    if rng.gen_bool(0.5) {
        flip(sample, axis)
    } else {
        sample.clone()
    }
}
