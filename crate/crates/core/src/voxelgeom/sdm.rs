use super::edt::squared_edt;
use super::{BinaryMask, SignedDistanceMap, SurfaceVoxelSet};

const FACE_NEIGHBORS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

fn is_boundary(mask: &BinaryMask, d: usize, h: usize, w: usize) -> bool {
    if !mask.get(d, h, w) {
        return false;
    }
    let shape = mask.shape();
    FACE_NEIGHBORS.iter().any(|o| {
        shape
            .checked_index(d as isize + o[0], h as isize + o[1], w as isize + o[2])
            .is_some_and(|n| !mask.get_index(n))
    })
}

/// Foreground voxels with at least one background 6-neighbor inside the grid.
///
/// Foreground voxels on the grid border are not boundary on that account alone:
/// an object cut by the patch edge has no surface there.
pub fn boundary_voxels(mask: &BinaryMask) -> SurfaceVoxelSet {
    let shape = mask.shape();
    let mut coords = Vec::new();
    for d in 0..shape.depth {
        for h in 0..shape.height {
            for w in 0..shape.width {
                if is_boundary(mask, d, h, w) {
                    coords.push([d, h, w]);
                }
            }
        }
    }
    SurfaceVoxelSet { shape, coords }
}

/// Raw signed distance map in voxels.
///
/// Background voxels get `+dist`, interior foreground `-dist`, boundary voxels `0`,
/// where `dist` is the Euclidean distance to the nearest boundary voxel. Masks without
/// a surface (empty or full) map to constant `+1` / `-1` with `degenerate` set.
pub fn signed_distance_map(mask: &BinaryMask) -> SignedDistanceMap {
    let shape = mask.shape();
    let constant = if mask.is_empty() {
        Some(1.0)
    } else if mask.is_full() {
        Some(-1.0)
    } else {
        None
    };
    if let Some(c) = constant {
        return SignedDistanceMap {
            shape,
            values: vec![c; shape.len()],
            normalized: false,
            degenerate: true,
        };
    }

    let surface = boundary_voxels(mask).indicator();
    let sq = squared_edt(shape, |i| surface.get_index(i));
    let values = sq
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let dist = s.sqrt();
            if mask.get_index(i) {
                -dist
            } else {
                dist
            }
        })
        .collect();
    SignedDistanceMap {
        shape,
        values,
        normalized: false,
        degenerate: false,
    }
}

/// Per-sign rescaling into `[-1, 1]`: positives divided by the largest positive value,
/// negatives by the magnitude of the most negative value. A side with no values is left
/// untouched. Idempotent.
pub fn normalize_sdm(raw: &SignedDistanceMap) -> SignedDistanceMap {
    let max_pos = raw.values.iter().copied().fold(0.0_f64, f64::max);
    let max_neg = raw.values.iter().copied().fold(0.0_f64, |a, v| a.max(-v));
    let values = raw
        .values
        .iter()
        .map(|&v| {
            if v > 0.0 {
                v / max_pos
            } else if v < 0.0 {
                v / max_neg
            } else {
                v
            }
        })
        .collect();
    SignedDistanceMap {
        shape: raw.shape,
        values,
        normalized: true,
        degenerate: raw.degenerate,
    }
}

/// `normalize_sdm(signed_distance_map(mask))`: the regression target for a mask.
pub fn sdm_target(mask: &BinaryMask) -> SignedDistanceMap {
    normalize_sdm(&signed_distance_map(mask))
}
