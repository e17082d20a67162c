use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Sample, SynthError};
use crate::voxelgeom::{sdm_target, BinaryMask, Grid, VolumeShape};

pub const MU_FOREGROUND: f32 = 0.75;
pub const MU_BACKGROUND: f32 = 0.25;
pub const DEFAULT_NOISE: f64 = 0.1;
pub const MAX_BUMP: f64 = 0.3;

/// A rotated ellipsoid with a smooth radial perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    /// `(d, h, w)` in voxel units.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Euler angles (radians), applied as z, then y, then x rotations.
    pub rotation: [f64; 3],
    /// Radial perturbation as a fraction of the radius.
    pub bump_amplitude: f64,
    pub bump_frequency: u32,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.radii.iter().any(|&r| !(r.is_finite() && r >= 2.0)) {
            return Err(SynthError::InvalidSpec(format!("radii must be at least 2 voxels, got {:?}", self.radii)));
        }
        if !(0.0..=MAX_BUMP).contains(&self.bump_amplitude) {
            return Err(SynthError::InvalidSpec(format!(
                "bump_amplitude must lie in [0, {MAX_BUMP}], got {}",
                self.bump_amplitude
            )));
        }
        if self.bump_frequency == 0 {
            return Err(SynthError::InvalidSpec("bump_frequency must be positive".into()));
        }
        Ok(())
    }

    /// Body-to-grid rotation matrix.
    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]];
        matmul(&matmul(&rz, &ry), &rx)
    }

    /// Half-extent along each grid axis of the bounding box, bumps included.
    pub fn half_extent(&self) -> [f64; 3] {
        let r = self.rotation_matrix();
        let grow = 1.0 + self.bump_amplitude;
        std::array::from_fn(|i| grow * (0..3).map(|j| (r[i][j] * self.radii[j]).powi(2)).sum::<f64>().sqrt())
    }

    /// Whether the shape keeps at least one voxel of margin inside `shape`.
    pub fn fits(&self, shape: VolumeShape) -> bool {
        let e = self.half_extent();
        let dims = shape.dims();
        (0..3).all(|i| self.center[i] - e[i] >= 1.0 && self.center[i] + e[i] <= dims[i] as f64 - 2.0)
    }

    /// Point-membership test in grid coordinates.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let r = self.rotation_matrix();
        self.contains_with(&r, p)
    }

    fn contains_with(&self, r: &[[f64; 3]; 3], p: [f64; 3]) -> bool {
        let v: [f64; 3] = std::array::from_fn(|i| p[i] - self.center[i]);
        // body coordinates: R^T v, scaled by the radii
        let q: [f64; 3] = std::array::from_fn(|j| (0..3).map(|i| r[i][j] * v[i]).sum::<f64>() / self.radii[j]);
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if rho == 0.0 {
            return true;
        }
        let f = self.bump_frequency as f64;
        let polar = (q[2] / rho).clamp(-1.0, 1.0).acos();
        let azimuth = q[1].atan2(q[0]);
        let bump = (f * azimuth).cos() * (f * polar).sin();
        rho <= 1.0 + self.bump_amplitude * bump
    }

    /// Samples the voxel centers inside the shape.
    pub fn rasterize(&self, shape: VolumeShape) -> BinaryMask {
        let r = self.rotation_matrix();
        BinaryMask::from_fn(shape, |d, h, w| self.contains_with(&r, [d as f64, h as f64, w as f64]))
    }

    /// Random spec that fits `shape`, with radii between 15% and 27% of the smallest side.
    pub fn random(shape: VolumeShape, rng: &mut impl Rng) -> Self {
        let side = shape.dims().into_iter().min().unwrap_or(0) as f64;
        loop {
            let radii = std::array::from_fn(|_| rng.gen_range(0.15..0.27) * side).map(|r: f64| r.max(2.0));
            let rotation = std::array::from_fn(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
            let mut spec = ShapeSpec {
                center: [0.0; 3],
                radii,
                rotation,
                bump_amplitude: rng.gen_range(0.0..0.2),
                bump_frequency: rng.gen_range(1..=3),
            };
            let e = spec.half_extent();
            let dims = shape.dims();
            let ranges: Vec<(f64, f64)> = (0..3).map(|i| (1.0 + e[i], dims[i] as f64 - 2.0 - e[i])).collect();
            if ranges.iter().any(|(lo, hi)| lo > hi) {
                continue;
            }
            spec.center = std::array::from_fn(|i| {
                let (lo, hi) = ranges[i];
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            });
            return spec;
        }
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Renders one labeled volume: mask, noisy min-max scaled intensities and SDM target.
pub fn generate_sample(
    id: &str,
    spec: &ShapeSpec,
    shape: VolumeShape,
    noise_level: f64,
    seed: u64,
) -> Result<Sample, SynthError> {
    spec.validate()?;
    if !spec.fits(shape) {
        return Err(SynthError::ShapeOutOfBounds {
            half_extent: spec.half_extent(),
            center: spec.center,
            shape,
        });
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(SynthError::InvalidSpec(format!("noise level must be non-negative, got {noise_level}")));
    }
    let mask = spec.rasterize(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_level).expect("finite non-negative std");
    let raw: Vec<f64> = mask
        .as_slice()
        .iter()
        .map(|&m| {
            let mu = if m == 1 { MU_FOREGROUND } else { MU_BACKGROUND } as f64;
            mu + noise.sample(&mut rng)
        })
        .collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let volume = Grid::from_vec(shape, raw.iter().map(|&v| ((v - lo) / span) as f32).collect())
        .expect("length matches shape");
    let sdm = sdm_target(&mask);
    Ok(Sample {
        id: id.to_string(),
        volume,
        mask,
        sdm,
    })
}
