use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Adam, Sgd, TrainConfig, TrainError};
use crate::derive_seed;
use crate::losses::{discriminator_loss, generator_loss, supervised_loss, LabeledPrediction};
use crate::segnet::{Discriminator, Segmenter, SegmenterOutput};
use crate::synthdata::{random_crop, random_flip, Dataset, Sample};
use crate::tensor::{Graph, Tensor, Var};
use crate::voxelgeom::Volume;

/// Augmented training crops: labeled items carry mask and SDM target, unlabeled only the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Volume>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[N, 1, D, H, W]`, labeled items first.
    pub fn images(&self) -> Tensor {
        let vols: Vec<&Volume> = self.labeled.iter().map(|s| &s.volume).chain(&self.unlabeled).collect();
        let [d, h, w] = vols[0].shape().dims();
        let mut data = Vec::with_capacity(vols.len() * d * h * w);
        for v in &vols {
            assert_eq!(v.shape().dims(), [d, h, w], "batch items must share a shape");
            data.extend_from_slice(v.as_slice());
        }
        Tensor::from_vec(&[vols.len(), 1, d, h, w], data)
    }
}

/// Draws the batch for iteration `t`: ids uniformly with replacement, random crops
/// and random flips, all from a generator seeded by `(config.seed, t)`.
pub fn sample_batch(dataset: &Dataset, config: &TrainConfig, t: u64) -> Result<Batch, TrainError> {
    let split = dataset.split();
    let n_labeled = config.labeled_in_batch();
    let n_unlabeled = if config.mode.adversarial() {
        config.batch_size - n_labeled
    } else {
        0
    };
    if split.labeled_ids.is_empty() {
        return Err(TrainError::Config {
            key: "labeled_ids".into(),
            message: "the split has no labeled volumes".into(),
        });
    }
    if n_unlabeled > 0 && split.unlabeled_ids.is_empty() {
        return Err(TrainError::Config {
            key: "unlabeled_ids".into(),
            message: "adversarial training needs unlabeled volumes".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, t));
    let crop = config.crop_shape();
    let augment = |id: &str, rng: &mut ChaCha8Rng| -> Result<Sample, TrainError> {
        let mut s = random_crop(dataset.sample(id), crop, rng).map_err(|e| TrainError::Data(e.to_string()))?;
        if config.flip {
            for axis in 0..3 {
                s = random_flip(&s, axis, rng);
            }
        }
        Ok(s)
    };
    let mut labeled = Vec::with_capacity(n_labeled);
    for _ in 0..n_labeled {
        let id = split.labeled_ids.choose(&mut rng).expect("nonempty");
        labeled.push(augment(id, &mut rng)?);
    }
    let mut unlabeled = Vec::with_capacity(n_unlabeled);
    for _ in 0..n_unlabeled {
        let id = split.unlabeled_ids.choose(&mut rng).expect("nonempty");
        let vol = &dataset.sample(id).volume;
        let outer = vol.shape().dims();
        if !crop.fits_within(&vol.shape()) {
            return Err(TrainError::Data(format!("crop {crop} does not fit volume {id} of shape {}", vol.shape())));
        }
        let origin = std::array::from_fn(|i| rng.gen_range(0..=outer[i] - crop.dims()[i]));
        let mut v = vol.crop(origin, crop);
        if config.flip {
            for axis in 0..3 {
                if rng.gen_bool(0.5) {
                    v = v.flip(axis);
                }
            }
        }
        unlabeled.push(v);
    }
    Ok(Batch { labeled, unlabeled })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegStepReport {
    pub dice: f64,
    /// `None` without an SDM head.
    pub mse: Option<f64>,
    /// Generator loss on the unlabeled crops, in adversarial mode.
    pub adversarial: Option<f64>,
    /// `dice + alpha mse + beta adversarial`.
    pub total: f64,
}

/// The segmenter objective built on a fresh graph, before backpropagation.
pub struct SegObjective {
    pub graph: Graph,
    pub params: Vec<Var>,
    pub input: Var,
    pub output: SegmenterOutput,
    /// Discriminator scores of the unlabeled crops, in adversarial mode.
    pub disc_scores: Option<Var>,
    pub root: Var,
    pub report: SegStepReport,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Supervised loss on the labeled crops plus `beta` times the generator loss of the
/// frozen discriminator on the unlabeled crops. Only unlabeled SDMs reach the
/// discriminator, so labeled items get no adversarial gradient.
pub fn segmenter_objective(
    seg: &Segmenter,
    disc: &Discriminator,
    batch: &Batch,
    config: &TrainConfig,
    beta: f64,
) -> Result<SegObjective, TrainError> {
    let data = |e: crate::segnet::SegnetError| TrainError::Data(e.to_string());
    let loss_err = |e: crate::losses::LossError| TrainError::Data(e.to_string());
    let mut g = Graph::new();
    let p = seg.params().bind(&mut g, true);
    let x = g.constant(batch.images());
    let out = seg.forward(&mut g, &p, x).map_err(data)?;
    let (n, nl) = (batch.len(), batch.labeled.len());
    let item = g.value(out.prob).item_len();

    let probs: Vec<Vec<f64>> = (0..nl).map(|i| to_f64(g.value(out.prob).item(i))).collect();
    let sdms: Option<Vec<Vec<f64>>> = out.sdm.map(|s| (0..nl).map(|i| to_f64(g.value(s).item(i))).collect());
    let labels: Vec<Vec<f64>> = batch
        .labeled
        .iter()
        .map(|s| s.mask.as_slice().iter().map(|&v| v as f64).collect())
        .collect();
    let items: Vec<LabeledPrediction> = (0..nl)
        .map(|i| LabeledPrediction {
            prob: &probs[i],
            label: &labels[i],
            sdm: sdms.as_ref().map(|s| s[i].as_slice()),
            target_sdm: &batch.labeled[i].sdm.values,
        })
        .collect();
    let sup = supervised_loss(&items, config.alpha).map_err(loss_err)?;

    let mut grad_prob = vec![0.0f32; n * item];
    for (i, gi) in sup.grad_prob.iter().enumerate() {
        for (dst, &v) in grad_prob[i * item..(i + 1) * item].iter_mut().zip(gi) {
            *dst = v as f32;
        }
    }
    let mut inputs = vec![out.prob];
    let mut local = vec![grad_prob];
    if let Some(s) = out.sdm {
        let mut grad_sdm = vec![0.0f32; n * item];
        for (i, gi) in sup.grad_sdm.iter().enumerate() {
            if let Some(gi) = gi {
                for (dst, &v) in grad_sdm[i * item..(i + 1) * item].iter_mut().zip(gi) {
                    *dst = v as f32;
                }
            }
        }
        inputs.push(s);
        local.push(grad_sdm);
    }
    let sup_node = g.scalar_fn(&inputs, sup.total, local);
    let mut terms = vec![(sup_node, 1.0f32)];

    let mut adversarial = None;
    let mut disc_scores = None;
    if config.mode.adversarial() && nl < n {
        let s = out.sdm.ok_or_else(|| TrainError::Config {
            key: "segmenter.sdm_head".into(),
            message: "adversarial training needs the SDM head".into(),
        })?;
        let q = disc.params().bind(&mut g, false);
        let idx: Vec<usize> = (nl..n).collect();
        let xu = g.select(x, &idx);
        let su = g.select(s, &idx);
        let d = disc.forward(&mut g, &q, xu, su).map_err(data)?;
        let gen = generator_loss(&to_f64(g.value(d).data())).map_err(loss_err)?;
        let grad: Vec<f32> = gen.grad.iter().map(|&v| v as f32).collect();
        let adv = g.scalar_fn(&[d], gen.value, vec![grad]);
        terms.push((adv, beta as f32));
        adversarial = Some(gen.value);
        disc_scores = Some(d);
    }
    let root = g.weighted_sum(&terms);
    let total = sup.total + beta * adversarial.unwrap_or(0.0);
    Ok(SegObjective {
        graph: g,
        params: p,
        input: x,
        output: out,
        disc_scores,
        root,
        report: SegStepReport {
            dice: sup.dice,
            mse: sdms.map(|_| sup.mse),
            adversarial,
            total,
        },
    })
}

/// Iteration index with its warm-up weight and learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub t: u64,
    pub beta: f64,
    pub lr: f64,
}

/// One SGD update of the segmenter. Returns the report and the SDM predictions made
/// before the update, detached, for the discriminator step.
pub fn segmenter_step(
    seg: &mut Segmenter,
    sgd: &mut Sgd,
    disc: &Discriminator,
    batch: &Batch,
    config: &TrainConfig,
    sched: Schedule,
) -> Result<(SegStepReport, Option<Tensor>), TrainError> {
    let mut obj = segmenter_objective(seg, disc, batch, config, sched.beta)?;
    if !obj.report.total.is_finite() {
        return Err(TrainError::NonFinite {
            t: sched.t,
            what: "segmenter loss".into(),
        });
    }
    obj.graph.backward(obj.root);
    let grads = obj.graph.grads_of(&obj.params);
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            t: sched.t,
            what: "segmenter gradient".into(),
        });
    }
    sgd.step(seg.params_mut(), &grads, sched.lr as f32);
    let detached = obj.output.sdm.map(|s| obj.graph.value(s).clone());
    Ok((obj.report, detached))
}

/// One Adam update of the discriminator on fixed inputs: the first `n_labeled` pairs
/// are the positive class.
pub fn discriminator_step(
    disc: &mut Discriminator,
    adam: &mut Adam,
    images: &Tensor,
    sdm: &Tensor,
    n_labeled: usize,
    lr: f32,
    t: u64,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let q = disc.params().bind(&mut g, true);
    let x = g.constant(images.clone());
    let s = g.constant(sdm.clone());
    let d = disc
        .forward(&mut g, &q, x, s)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let scores = to_f64(g.value(d).data());
    let loss = discriminator_loss(&scores[..n_labeled], &scores[n_labeled..])
        .map_err(|e| TrainError::Data(e.to_string()))?;
    if !loss.value.is_finite() {
        return Err(TrainError::NonFinite {
            t,
            what: "discriminator loss".into(),
        });
    }
    let grad: Vec<f32> = loss
        .grad_labeled
        .iter()
        .chain(&loss.grad_unlabeled)
        .map(|&v| v as f32)
        .collect();
    let root = g.scalar_fn(&[d], loss.value, vec![grad]);
    g.backward(root);
    let grads = g.grads_of(&q);
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            t,
            what: "discriminator gradient".into(),
        });
    }
    adam.step(disc.params_mut(), &grads, lr);
    Ok(loss.value)
}
