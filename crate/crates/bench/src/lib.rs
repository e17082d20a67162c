//! Benchmark fixtures shared by the criterion targets.

use shapeseg::synthdata::{generate_sample, Sample, ShapeSpec};
use shapeseg::VolumeShape;

/// A centered, slightly bumped ellipsoid in a cube of side `n`.
pub fn phantom(n: usize) -> Sample {
    let shape = VolumeShape::cube(n);
    let c = n as f64 / 2.0;
    let spec = ShapeSpec {
        center: [c, c, c],
        radii: [0.3 * n as f64, 0.25 * n as f64, 0.2 * n as f64],
        rotation: [0.3, 0.2, 0.1],
        bump_amplitude: 0.1,
        bump_frequency: 2,
    };
    generate_sample("bench", &spec, shape, 0.1, 7).expect("phantom fits")
}
