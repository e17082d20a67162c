//! Exact Euclidean distance transform.
//!
//! Squared distances are computed with the separable lower-envelope-of-parabolas
//! algorithm, one 1D pass per axis. All intermediate values are integers held in
//! `f64`, so the squared result is exact and the only rounding is the final `sqrt`.

use super::{BinaryMask, DistanceField, GeomError, VolumeShape};

/// Scratch buffers for the 1D pass, reused across lines.
struct LowerEnvelope {
    /// Locations of the parabolas forming the envelope.
    sites: Vec<usize>,
    /// Left boundary of the interval where each parabola is minimal.
    starts: Vec<f64>,
    line: Vec<f64>,
    out: Vec<f64>,
}

impl LowerEnvelope {
    fn new(len: usize) -> Self {
        Self {
            sites: Vec::with_capacity(len),
            starts: Vec::with_capacity(len),
            line: vec![0.0; len],
            out: vec![0.0; len],
        }
    }

    /// `out[q] = min_p (q - p)^2 + line[p]`; infinite entries of `line` contribute no parabola.
    fn transform(&mut self, n: usize) {
        let f = &self.line[..n];
        self.sites.clear();
        self.starts.clear();
        for q in 0..n {
            let fq = f[q];
            if fq.is_infinite() {
                continue;
            }
            loop {
                match self.sites.last() {
                    None => {
                        self.sites.push(q);
                        self.starts.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let (qf, pf) = (q as f64, p as f64);
                        let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                        if s <= *self.starts.last().unwrap() {
                            self.sites.pop();
                            self.starts.pop();
                        } else {
                            self.sites.push(q);
                            self.starts.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.sites.is_empty() {
            self.out[..n].fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for q in 0..n {
            while k + 1 < self.sites.len() && self.starts[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.sites[k];
            let dq = q as f64 - p as f64;
            self.out[q] = dq * dq + f[p];
        }
    }
}

/// Squared distance from every voxel to the nearest site. Voxels with no site anywhere
/// in the grid come out as `+inf`.
pub fn squared_edt(shape: VolumeShape, is_site: impl Fn(usize) -> bool) -> Vec<f64> {
    let [nd, nh, nw] = shape.dims();
    let mut field: Vec<f64> = (0..shape.len())
        .map(|i| if is_site(i) { 0.0 } else { f64::INFINITY })
        .collect();
    let mut env = LowerEnvelope::new(nd.max(nh).max(nw));

    // width: contiguous lines
    for d in 0..nd {
        for h in 0..nh {
            let base = shape.index(d, h, 0);
            env.line[..nw].copy_from_slice(&field[base..base + nw]);
            env.transform(nw);
            field[base..base + nw].copy_from_slice(&env.out[..nw]);
        }
    }
    // height: stride nw
    for d in 0..nd {
        for w in 0..nw {
            let base = shape.index(d, 0, w);
            for h in 0..nh {
                env.line[h] = field[base + h * nw];
            }
            env.transform(nh);
            for h in 0..nh {
                field[base + h * nw] = env.out[h];
            }
        }
    }
    // depth: stride nh * nw
    let plane = nh * nw;
    for h in 0..nh {
        for w in 0..nw {
            let base = shape.index(0, h, w);
            for d in 0..nd {
                env.line[d] = field[base + d * plane];
            }
            env.transform(nd);
            for d in 0..nd {
                field[base + d * plane] = env.out[d];
            }
        }
    }
    field
}

/// Euclidean distance (voxels) from every voxel to the nearest foreground voxel.
pub fn exact_edt(mask: &BinaryMask) -> Result<DistanceField, GeomError> {
    if mask.is_empty() {
        return Err(GeomError::NoForeground);
    }
    let values = squared_edt(mask.shape(), |i| mask.get_index(i))
        .into_iter()
        .map(f64::sqrt)
        .collect();
    Ok(DistanceField {
        shape: mask.shape(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mask: &BinaryMask) -> Vec<f64> {
        let shape = mask.shape();
        let fg: Vec<[usize; 3]> = mask.foreground_indices().map(|i| shape.coords(i)).collect();
        (0..shape.len())
            .map(|i| {
                let c = shape.coords(i);
                fg.iter()
                    .map(|f| {
                        let dd = c[0] as f64 - f[0] as f64;
                        let dh = c[1] as f64 - f[1] as f64;
                        let dw = c[2] as f64 - f[2] as f64;
                        (dd * dd + dh * dh + dw * dw).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn single_center_voxel() {
        let shape = VolumeShape::cube(3);
        let mask = BinaryMask::from_fn(shape, |d, h, w| (d, h, w) == (1, 1, 1));
        let edt = exact_edt(&mask).unwrap();
        assert!((edt.get(0, 0, 0) - 3f64.sqrt()).abs() < 1e-12);
        assert!((edt.get(0, 0, 0) - 1.7320508).abs() < 1e-7);
        assert_eq!(edt.get(1, 1, 1), 0.0);
        assert_eq!(edt.get(1, 1, 0), 1.0);
    }

    #[test]
    fn all_foreground_is_zero() {
        let mask = BinaryMask::full(VolumeShape::new(2, 3, 4).unwrap());
        assert!(exact_edt(&mask).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mask = BinaryMask::empty(VolumeShape::cube(4));
        assert_eq!(exact_edt(&mask), Err(GeomError::NoForeground));
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let shape = VolumeShape::new(
                rng.gen_range(1..=12),
                rng.gen_range(1..=12),
                rng.gen_range(1..=12),
            )
            .unwrap();
            let density = rng.gen_range(0.01..0.4);
            let mut mask = BinaryMask::from_fn(shape, |_, _, _| rng.gen_bool(density));
            if mask.is_empty() {
                mask.set(0, 0, 0, true);
            }
            let edt = exact_edt(&mask).unwrap();
            for (a, b) in edt.values.iter().zip(brute_force(&mask)) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn handles_lines_without_sites() {
        // Only one voxel set in a long thin grid: most 1D lines in the first pass are empty.
        let shape = VolumeShape::new(1, 7, 1).unwrap();
        let mask = BinaryMask::from_fn(shape, |_, h, _| h == 6);
        let edt = exact_edt(&mask).unwrap();
        let expect: Vec<f64> = (0..7).map(|h| (6 - h) as f64).collect();
        assert_eq!(edt.values, expect);
    }
}
