use shapeseg::segnet::{Discriminator, DiscriminatorConfig, Segmenter, SegmenterConfig};
use shapeseg::synthdata::{make_dataset, Dataset, DatasetConfig};
use shapeseg::tensor::Tensor;
use shapeseg::trainer::{
    discriminator_step, read_log, run_training, sample_batch, segmenter_objective, segmenter_step, Adam, Batch,
    LogRecord, Schedule, Sgd, TrainConfig, TrainMode, Trainer,
};
use shapeseg::VolumeShape;

fn toy_dataset(dir: &std::path::Path) -> Dataset {
    let cfg = DatasetConfig::new(8, VolumeShape::new(24, 24, 24).unwrap(), (3, 3, 2), 5);
    make_dataset(&cfg, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn toy_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        total_iters: 20,
        crop: [16, 16, 16],
        seed: 3,
        val_every: 0,
        checkpoint_every: 0,
        segmenter: SegmenterConfig { base_channels: 4, ..SegmenterConfig::default() },
        ..TrainConfig::default()
    }
    .normalized()
}

#[test]
fn batches_have_the_mode_composition_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let full = toy_config(TrainMode::Full);
    let b = sample_batch(&ds, &full, 7).unwrap();
    assert_eq!((b.labeled.len(), b.unlabeled.len()), (2, 2));
    assert_eq!(b.images().shape(), &[4, 1, 16, 16, 16]);
    assert_eq!(sample_batch(&ds, &full, 7).unwrap(), b);
    assert_ne!(sample_batch(&ds, &full, 8).unwrap(), b);
    let sup = toy_config(TrainMode::Supervised);
    let b = sample_batch(&ds, &sup, 7).unwrap();
    assert_eq!((b.labeled.len(), b.unlabeled.len()), (4, 0));
}

#[test]
fn labeled_sdm_gradient_is_only_the_regression_term() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let cfg = toy_config(TrainMode::Full);
    let seg = Segmenter::new(cfg.segmenter.clone(), 1).unwrap();
    let disc = Discriminator::new(cfg.discriminator.clone(), 2).unwrap();
    let batch = sample_batch(&ds, &cfg, 1).unwrap();
    let mut obj = segmenter_objective(&seg, &disc, &batch, &cfg, 0.5).unwrap();
    obj.graph.backward(obj.root);
    let s = obj.output.sdm.unwrap();
    let pred = obj.graph.value(s).clone();
    let grad = obj.graph.grad(s).unwrap().to_vec();
    let item = pred.item_len();
    let nl = batch.labeled.len();
    for (i, sample) in batch.labeled.iter().enumerate() {
        for k in 0..item {
            // alpha * d/ds mean((s - z)^2), averaged over the labeled items
            let expect = cfg.alpha * 2.0 * (pred.item(i)[k] as f64 - sample.sdm.values[k]) / item as f64 / nl as f64;
            let got = grad[i * item + k] as f64;
            assert!((got - expect).abs() <= 1e-6 * expect.abs() + 1e-12, "item {i} voxel {k}: {got} vs {expect}");
        }
    }
    let unlabeled_grad = &grad[nl * item..];
    assert!(unlabeled_grad.iter().any(|&v| v != 0.0));
}

#[test]
fn one_small_step_lowers_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    for mode in [TrainMode::Supervised, TrainMode::SupervisedSdm, TrainMode::Full] {
        let cfg = toy_config(mode);
        let mut seg = Segmenter::new(cfg.segmenter.clone(), 1).unwrap();
        let disc = Discriminator::new(cfg.discriminator.clone(), 2).unwrap();
        let mut sgd = Sgd::new(seg.params(), 0.9, 0.0);
        let batch = sample_batch(&ds, &cfg, 1).unwrap();
        let before = segmenter_objective(&seg, &disc, &batch, &cfg, 0.5).unwrap().report.total;
        let sched = Schedule { t: 1, beta: 0.5, lr: 1e-3 };
        segmenter_step(&mut seg, &mut sgd, &disc, &batch, &cfg, sched).unwrap();
        let after = segmenter_objective(&seg, &disc, &batch, &cfg, 0.5).unwrap().report.total;
        assert!(after < before, "{mode:?}: {before} -> {after}");
    }
}

#[test]
fn saturated_correct_predictions_leave_parameters_still() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let cfg = TrainConfig { weight_decay: 0.0, ..toy_config(TrainMode::Full) };
    let mut seg = Segmenter::new(cfg.segmenter.clone(), 1).unwrap();
    seg.zero_output_layers();
    // empty masks with constant +1 SDM targets, matched by saturated heads
    let p = seg.params_mut();
    let seg_bias = p.slot("seg_head.bias").unwrap();
    p.get_mut(seg_bias).data_mut().fill(-40.0);
    let sdm_bias = p.slot("sdm_head.bias").unwrap();
    p.get_mut(sdm_bias).data_mut().fill(40.0);
    let disc = Discriminator::new(cfg.discriminator.clone(), 2).unwrap();
    let mut batch = sample_batch(&ds, &cfg, 1).unwrap();
    for s in &mut batch.labeled {
        s.mask = shapeseg::BinaryMask::empty(s.mask.shape());
        s.sdm.values.iter_mut().for_each(|v| *v = 1.0);
    }
    let before = seg.params().clone();
    let mut sgd = Sgd::new(seg.params(), 0.9, 0.0);
    let sched = Schedule { t: 1, beta: 0.0, lr: 0.01 };
    segmenter_step(&mut seg, &mut sgd, &disc, &batch, &cfg, sched).unwrap();
    let moved: f64 = before
        .tensors()
        .iter()
        .zip(seg.params().tensors())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)))
        .sum::<f64>()
        .sqrt();
    assert!(moved < 1e-6, "parameter change {moved}");
}

fn separable_pair() -> (Tensor, Tensor) {
    let n = 16 * 16 * 16;
    let x = Tensor::from_vec(&[4, 1, 16, 16, 16], vec![0.5; 4 * n]);
    let mut s = vec![0.5f32; 4 * n];
    s[2 * n..].fill(-0.5);
    (x, Tensor::from_vec(&[4, 1, 16, 16, 16], s))
}

#[test]
fn discriminator_starts_at_two_ln_two_and_separates_a_toy_pair() {
    let mut disc = Discriminator::new(DiscriminatorConfig::default(), 4).unwrap();
    disc.zero_output_layers();
    let seg_before = Segmenter::new(SegmenterConfig::default(), 9).unwrap();
    let snapshot = seg_before.params().clone();
    let mut adam = Adam::new(disc.params(), 0.9, 0.999);
    let (x, s) = separable_pair();
    let first = discriminator_step(&mut disc, &mut adam, &x, &s, 2, 1e-4, 1).unwrap();
    assert!((first - 2.0 * std::f64::consts::LN_2).abs() < 1e-6, "{first}");
    let mut last = first;
    for t in 2..=200 {
        last = discriminator_step(&mut disc, &mut adam, &x, &s, 2, 1e-4, t).unwrap();
    }
    assert!(last < 0.05, "loss after 200 steps {last}");
    assert_eq!(seg_before.params(), &snapshot);
}

#[test]
fn discriminator_step_leaves_the_segmenter_alone() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let mut tr = Trainer::new(toy_config(TrainMode::Full)).unwrap();
    let batch: Batch = sample_batch(&ds, &tr.config, 1).unwrap();
    let (s, _) = tr.seg.predict(&batch.images()).unwrap();
    let seg = tr.seg.params().clone();
    let disc = tr.disc.params().clone();
    let mut adam = Adam::new(tr.disc.params(), 0.9, 0.999);
    discriminator_step(&mut tr.disc, &mut adam, &batch.images(), &s, 2, 1e-4, 1).unwrap();
    assert_eq!(tr.seg.params(), &seg);
    assert_ne!(tr.disc.params(), &disc);
}

fn iterations(records: &[LogRecord]) -> Vec<LogRecord> {
    records
        .iter()
        .filter(|r| matches!(r, LogRecord::Iter(_) | LogRecord::Val(_)))
        .map(LogRecord::without_timing)
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let cfg = TrainConfig { total_iters: 6, val_every: 3, ..toy_config(TrainMode::Full) };
    let (a, _, ra) = run_training(&ds, &cfg, None).unwrap();
    let (b, _, rb) = run_training(&ds, &cfg, None).unwrap();
    assert_eq!(iterations(&ra), iterations(&rb));
    assert_eq!(a.seg.params(), b.seg.params());
    assert_eq!(a.disc.params(), b.disc.params());
    let other = TrainConfig { seed: 4, ..cfg };
    let (c, _, _) = run_training(&ds, &other, None).unwrap();
    assert_ne!(a.seg.params(), c.seg.params());
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("data"));
    let cfg = TrainConfig { total_iters: 50, checkpoint_every: 25, val_every: 25, ..toy_config(TrainMode::Full) };
    let straight = dir.path().join("straight");
    let (full, summary, records) = run_training(&ds, &cfg, Some(&straight)).unwrap();
    assert_eq!(summary.iterations, 50);
    assert_eq!(read_log(&straight.join("train_log.jsonl")).unwrap(), records);

    let ckpt = shapeseg::segnet::Archive::load(&straight.join("checkpoint_000025.ckpt")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt, None).unwrap();
    assert_eq!(resumed.iteration(), 25);
    let mut tail = Vec::new();
    resumed.run(&ds, None, &mut |r| tail.push(r.clone())).unwrap();
    let straight_tail: Vec<LogRecord> = iterations(&records)
        .into_iter()
        .filter(|r| match r {
            LogRecord::Iter(it) => it.t > 25,
            LogRecord::Val(v) => v.t > 25,
            _ => false,
        })
        .collect();
    assert_eq!(iterations(&tail), straight_tail);
    assert_eq!(resumed.seg.params(), full.seg.params());
    assert_eq!(resumed.disc.params(), full.disc.params());
    assert_eq!(resumed.checkpoint(), full.checkpoint());
}
