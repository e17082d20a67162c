//! Overlap and surface-distance metrics, thresholding and largest-component cleanup.

mod table;

pub use table::{evaluate_dataset, MetricsTable, MetricsMean, VolumeFailure};

use serde::{Deserialize, Serialize};

use crate::voxelgeom::{boundary_voxels, largest_component, squared_edt, BinaryMask, Volume, VolumeShape};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(VolumeShape, VolumeShape),
    #[error("undefined-surface-metric: {0} has no surface voxels")]
    UndefinedSurface(&'static str),
    #[error("empty distance set")]
    EmptyDistances,
}

/// Per-volume metrics. Distances are in voxels; surface metrics are `None` when
/// either mask has no surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    pub nms_applied: bool,
}

/// `1` where `prob >= threshold`.
pub fn binarize(prob: &Volume, threshold: f32) -> BinaryMask {
    let voxels = prob.as_slice().iter().map(|&p| (p >= threshold) as u8).collect();
    BinaryMask::from_vec(prob.shape(), voxels).expect("binary values and matching length")
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// `(dice, jaccard)`; both are 1 when both masks are empty.
pub fn dice_jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64), MetricError> {
    same_shape(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (a & b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64))
}

/// Distances from each surface voxel of `a` to the surface of `b`, followed by those
/// from `b` to `a`. Surfaces follow [`boundary_voxels`].
pub fn surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<f64>, MetricError> {
    same_shape(a, b)?;
    let sa = boundary_voxels(a);
    let sb = boundary_voxels(b);
    if sa.is_empty() {
        return Err(MetricError::UndefinedSurface("first mask"));
    }
    if sb.is_empty() {
        return Err(MetricError::UndefinedSurface("second mask"));
    }
    let shape = a.shape();
    let (ia, ib) = (sa.indicator(), sb.indicator());
    let to_b = squared_edt(shape, |i| ib.get_index(i));
    let to_a = squared_edt(shape, |i| ia.get_index(i));
    let mut out = Vec::with_capacity(sa.len() + sb.len());
    out.extend(sa.coords.iter().map(|&[d, h, w]| to_b[shape.index(d, h, w)].sqrt()));
    out.extend(sb.coords.iter().map(|&[d, h, w]| to_a[shape.index(d, h, w)].sqrt()));
    Ok(out)
}

/// Mean of the combined distance multiset.
pub fn asd(distances: &[f64]) -> Result<f64, MetricError> {
    if distances.is_empty() {
        return Err(MetricError::EmptyDistances);
    }
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn percentile(distances: &[f64], q: f64) -> Result<f64, MetricError> {
    if distances.is_empty() {
        return Err(MetricError::EmptyDistances);
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn hd95(distances: &[f64]) -> Result<f64, MetricError> {
    percentile(distances, 0.95)
}

/// Metrics of a binary prediction against ground truth.
pub fn compare_masks(id: &str, pred: &BinaryMask, gt: &BinaryMask, nms_applied: bool) -> Result<MetricsReport, MetricError> {
    let (dice, jaccard) = dice_jaccard(pred, gt)?;
    let (asd_v, hd95_v) = match surface_distances(pred, gt) {
        Ok(d) => (Some(asd(&d)?), Some(hd95(&d)?)),
        Err(MetricError::UndefinedSurface(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        id: id.to_string(),
        dice,
        jaccard,
        asd: asd_v,
        hd95: hd95_v,
        nms_applied,
    })
}

/// Threshold at 0.5, optionally keep the largest component, then score.
pub fn evaluate_volume(id: &str, prob: &Volume, gt: &BinaryMask, apply_nms: bool) -> Result<MetricsReport, MetricError> {
    let mut pred = binarize(prob, DEFAULT_THRESHOLD);
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch(pred.shape(), gt.shape()));
    }
    if apply_nms {
        pred = largest_component(&pred);
    }
    compare_masks(id, &pred, gt, apply_nms)
}
