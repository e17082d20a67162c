//! Network architectures: the dual-head volumetric segmenter and the pair discriminator.

mod archive;
mod discriminator;
mod layers;
mod params;
mod segmenter;

pub use archive::{Archive, ArchiveError, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use discriminator::{Discriminator, DiscriminatorConfig, LEAKY_SLOPE};
pub use params::ParamStore;
pub use segmenter::{Activation, NormKind, Segmenter, SegmenterConfig, SegmenterOutput};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum SegnetError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input spatial dims {dims:?} must be positive multiples of {divisor}")]
    IndivisibleInput { dims: [usize; 3], divisor: usize },
    #[error("expected a [N, 1, D, H, W] input, got {0:?}")]
    InputShape(Vec<usize>),
    #[error("volume {0:?} and sdm {1:?} must share a [N, 1, D, H, W] shape")]
    PairShape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("archive does not match the network: {0}")]
    Mismatch(String),
}

impl Segmenter {
    /// Stand-alone archive: config echo plus tensors under `seg/`.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(
            json!({ "segmenter": self.config() }),
            json!({ "kind": "segmenter" }),
        );
        a.extend_prefixed("seg", self.params().named());
        a
    }

    /// Rebuilds a segmenter from any archive carrying a `segmenter` config and `seg/` tensors.
    pub fn from_archive(archive: &Archive) -> Result<Self, SegnetError> {
        let cfg = archive
            .config
            .get("segmenter")
            .ok_or_else(|| SegnetError::Mismatch("no segmenter config in archive".into()))?;
        let config: SegmenterConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| SegnetError::Mismatch(e.to_string()))?;
        let mut net = Segmenter::new(config, 0)?;
        net.params_mut()
            .load(&archive.prefixed("seg"))
            .map_err(SegnetError::Mismatch)?;
        Ok(net)
    }
}

impl Discriminator {
    pub fn from_archive(archive: &Archive) -> Result<Self, SegnetError> {
        let cfg = archive
            .config
            .get("discriminator")
            .ok_or_else(|| SegnetError::Mismatch("no discriminator config in archive".into()))?;
        let config: DiscriminatorConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| SegnetError::Mismatch(e.to_string()))?;
        let mut net = Discriminator::new(config, 0)?;
        net.params_mut()
            .load(&archive.prefixed("disc"))
            .map_err(SegnetError::Mismatch)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor {
        let len = n * side * side * side;
        Tensor::from_vec(&[n, 1, side, side, side], (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn small() -> SegmenterConfig {
        SegmenterConfig {
            base_channels: 4,
            ..SegmenterConfig::default()
        }
    }

    #[test]
    fn segmenter_shape_and_range() {
        let net = Segmenter::new(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for side in [4, 8, 12] {
            let x = random_input(&mut rng, 2, side);
            let (m, s) = net.predict(&x).unwrap();
            let s = s.unwrap();
            assert_eq!(m.shape(), x.shape());
            assert_eq!(s.shape(), x.shape());
            assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.data().iter().all(|v| *v > -1.0 && *v < 1.0));
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = Segmenter::new(small(), 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 6, 8, 8]);
        assert!(matches!(net.predict(&x), Err(SegnetError::IndivisibleInput { divisor: 4, .. })));
        assert!(matches!(
            net.predict(&Tensor::zeros(&[1, 2, 8, 8, 8])),
            Err(SegnetError::InputShape(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(Segmenter::new(SegmenterConfig { levels: 1, ..small() }, 0).is_err());
        assert!(Segmenter::new(SegmenterConfig { base_channels: 2, ..small() }, 0).is_err());
        let bad = DiscriminatorConfig {
            conv_channels: vec![8, 8, 8, 8],
            ..DiscriminatorConfig::default()
        };
        assert!(Discriminator::new(bad, 0).is_err());
    }

    #[test]
    fn zeroed_heads_give_neutral_outputs() {
        let mut net = Segmenter::new(small(), 3).unwrap();
        net.zero_output_layers();
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(4), 1, 8);
        let (m, s) = net.predict(&x).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
        assert!(s.unwrap().data().iter().all(|&v| v == 0.0));

        let mut d = Discriminator::new(DiscriminatorConfig::default(), 3).unwrap();
        d.zero_output_layers();
        assert_eq!(d.predict(&x, &x).unwrap().data(), &[0.5]);
    }

    #[test]
    fn init_is_seeded() {
        let a = Segmenter::new(small(), 7).unwrap();
        let b = Segmenter::new(small(), 7).unwrap();
        let c = Segmenter::new(small(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.params().is_finite());
        let d1 = Discriminator::new(DiscriminatorConfig::default(), 7).unwrap();
        let d2 = Discriminator::new(DiscriminatorConfig::default(), 8).unwrap();
        assert_ne!(d1.params(), d2.params());
        assert!(d1.params().is_finite());
    }

    #[test]
    fn single_head_variant() {
        let net = Segmenter::new(
            SegmenterConfig {
                sdm_head: false,
                ..small()
            },
            1,
        )
        .unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let (m, s) = net.predict(&x).unwrap();
        assert_eq!(m.shape(), x.shape());
        assert!(s.is_none());
    }

    #[test]
    fn shared_trunk_moves_both_heads() {
        let mut net = Segmenter::new(small(), 11).unwrap();
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(12), 1, 8);
        let (m0, s0) = net.predict(&x).unwrap();
        // last decoder conv feeds both heads
        let slot = net.params().slot("dec0.0.conv.weight").unwrap();
        assert!(net.shared_slots().contains(&slot));
        for v in net.params_mut().get_mut(slot).data_mut() {
            *v += 0.05;
        }
        let (m1, s1) = net.predict(&x).unwrap();
        let dm: f32 = m0.data().iter().zip(m1.data()).map(|(a, b)| (a - b).abs()).sum();
        let ds: f32 = s0.unwrap().data().iter().zip(s1.unwrap().data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(dm > 1e-3 && ds > 1e-3, "dm {dm} ds {ds}");
    }

    #[test]
    fn all_parameter_gradients_are_finite() {
        let net = Segmenter::new(small(), 5).unwrap();
        let disc = Discriminator::new(DiscriminatorConfig::default(), 5).unwrap();
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(6), 2, 8);
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, true);
        let q = disc.params().bind(&mut g, true);
        let xv = g.constant(x);
        let out = net.forward(&mut g, &p, xv).unwrap();
        let s = out.sdm.unwrap();
        let d = disc.forward(&mut g, &q, xv, s).unwrap();
        let mean = |g: &Graph, v| {
            let t: &Tensor = g.value(v);
            let n = t.len();
            (t.data().iter().map(|&a| a as f64).sum::<f64>() / n as f64, vec![1.0 / n as f32; n])
        };
        let (vm, gm) = mean(&g, out.prob);
        let (vd, gd) = mean(&g, d);
        let lm = g.scalar_fn(&[out.prob], vm, vec![gm]);
        let ld = g.scalar_fn(&[d], vd, vec![gd]);
        let root = g.weighted_sum(&[(lm, 1.0), (ld, 1.0)]);
        g.backward(root);
        for (i, grad) in g.grads_of(&p).iter().enumerate() {
            assert!(grad.iter().all(|v| v.is_finite()), "{}", net.params().name(i));
        }
        let gz = g.grads_of(&q);
        assert!(gz.iter().flatten().all(|v| v.is_finite()));
        assert!(gz.iter().flatten().any(|&v| v != 0.0));
        // the SDM head only receives signal through the discriminator
        let head = net.params().slot("sdm_head.weight").unwrap();
        assert!(g.grads_of(&p)[head].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn discriminator_range_and_sdm_gradient() {
        let disc = Discriminator::new(DiscriminatorConfig::default(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let x = random_input(&mut rng, 3, 16);
            let s = random_input(&mut rng, 3, 16);
            let d = disc.predict(&x, &s).unwrap();
            assert_eq!(d.shape(), &[3, 1]);
            assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(disc
            .predict(&Tensor::zeros(&[1, 1, 8, 8, 8]), &Tensor::zeros(&[1, 1, 8, 8, 4]))
            .is_err());

        // analytic d D / d s against central differences on a few voxels
        let x = random_input(&mut rng, 1, 16);
        let s = random_input(&mut rng, 1, 16);
        let mut g = Graph::new();
        let q = disc.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let sv = g.leaf(s.clone());
        let d = disc.forward(&mut g, &q, xv, sv).unwrap();
        let root = g.scalar_fn(&[d], g.value(d).data()[0] as f64, vec![vec![1.0]]);
        g.backward(root);
        let grad = g.grad(sv).unwrap().to_vec();
        assert!(grad.iter().any(|&v| v != 0.0));
        // directional derivative along sign(grad): per-voxel differences drown in
        // f32 rounding at this output scale, and large steps cross leaky-ReLU kinks
        let h = 1e-3f32;
        let u: Vec<f32> = grad.iter().map(|g| g.signum()).collect();
        let shift = |sign: f32| {
            let mut t = s.clone();
            t.data_mut().iter_mut().zip(&u).for_each(|(a, b)| *a += sign * h * b);
            disc.predict(&x, &t).unwrap().data()[0] as f64
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h as f64);
        let analytic: f64 = grad.iter().map(|g| g.abs() as f64).sum();
        assert!(fd > 0.0);
        assert!((fd - analytic).abs() / analytic < 0.05, "fd {fd} vs analytic {analytic}");
    }

    #[test]
    fn archive_round_trip() {
        let net = Segmenter::new(small(), 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.to_archive().save(&path).unwrap();
        let back = Segmenter::from_archive(&Archive::load(&path).unwrap()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.config(), net.config());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Archive::read_from(&bytes[..]), Err(ArchiveError::Truncated { .. })));
        assert!(matches!(Archive::read_from(&b"garbage!garbage"[..]), Err(ArchiveError::BadMagic)));
        let mut wrong = std::fs::read(&path).unwrap();
        wrong[8] = 9;
        assert!(matches!(Archive::read_from(&wrong[..]), Err(ArchiveError::UnsupportedVersion(9))));
    }
}
