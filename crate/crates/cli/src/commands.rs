use std::fs;
use std::path::Path;

use shapeseg::evalmetrics::{binarize, evaluate_dataset, MetricsTable};
use shapeseg::segnet::{Archive, ArchiveError, Segmenter, SegnetError};
use shapeseg::synthdata::{
    load_volume, locate_manifest, make_dataset, read_manifest, save_volume, Dataset, DatasetConfig, SynthError,
    VolumeData,
};
use shapeseg::tensor::Tensor;
use shapeseg::trainer::{run_ablation, LogRecord, TrainConfig, TrainError, TrainMode, Trainer};
use shapeseg::voxelgeom::{largest_component, sdm_target, Grid, SignedDistanceMap};
use shapeseg::VolumeShape;

use crate::{existing, Failure};

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => Failure::Runtime(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } | TrainError::Parse(_) | TrainError::Checkpoint(_) => {
                Failure::Invalid(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ArchiveError> for Failure {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::Io(_) => Failure::Runtime(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

impl From<SegnetError> for Failure {
    fn from(e: SegnetError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(io(path))
}

fn load_segmenter(checkpoint: &Path) -> Result<Segmenter, Failure> {
    existing(checkpoint, "checkpoint")?;
    let archive = Archive::load(checkpoint)?;
    Ok(Segmenter::from_archive(&archive)?)
}

pub fn gen_data(
    count: usize,
    shape: [usize; 3],
    split: (usize, usize, usize),
    seed: u64,
    noise: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    let [d, h, w] = shape;
    let shape = VolumeShape::new(d, h, w).map_err(|e| Failure::Invalid(e.to_string()))?;
    let mut config = DatasetConfig::new(count, shape, split, seed);
    if let Some(n) = noise {
        config.noise_level = n;
    }
    let manifest = make_dataset(&config, out)?;
    let s = &manifest.split;
    println!(
        "wrote {count} cases of shape {shape} to {} ({} labeled, {} unlabeled, {} val)",
        out.display(),
        s.labeled_ids.len(),
        s.unlabeled_ids.len(),
        s.val_ids.len()
    );
    Ok(())
}

pub fn compute_sdm(mask: &Path, out: &Path) -> Result<(), Failure> {
    existing(mask, "mask file")?;
    let (header, data) = load_volume(mask)?;
    let sdm = sdm_target(&data.into_mask()?);
    save_volume(out, &header.id, &VolumeData::Sdm(sdm))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    mode: Option<TrainMode>,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let archive = match resume {
        Some(p) => {
            existing(p, "checkpoint")?;
            Some(Archive::load(p)?)
        }
        None => None,
    };
    let mut cfg = match (config, &archive) {
        (Some(p), _) => {
            existing(p, "config")?;
            TrainConfig::parse_toml(&fs::read_to_string(p).map_err(io(p))?)?
        }
        (None, Some(a)) => serde_json::from_value(a.config.clone())
            .map_err(|e| Failure::Invalid(format!("checkpoint config: {e}")))?,
        (None, None) => return Err(Failure::Invalid("--config is required unless --resume is given".into())),
    };
    if let Some(m) = mode {
        cfg = cfg.with_mode(m);
    }
    // the SDM head follows the mode
    let cfg = cfg.normalized();
    cfg.validate()?;
    existing(data, "dataset")?;
    let dataset = Dataset::load(data)?;
    let mut trainer = match &archive {
        Some(a) => Trainer::from_checkpoint(a, Some(cfg))?,
        None => Trainer::new(cfg)?,
    };
    eprintln!(
        "training mode {} from t = {} to {} on {}",
        trainer.config.mode.name(),
        trainer.iteration(),
        trainer.config.total_iters,
        data.display()
    );
    let every = (trainer.config.total_iters / 20).max(1);
    let summary = trainer.run(&dataset, Some(out), &mut |rec| match rec {
        LogRecord::Iter(it) if it.t % every == 0 => eprintln!(
            "t {:>6}  loss {:.4}  dice {:.4}  disc {}  lr {:.1e}",
            it.t,
            it.seg_loss,
            it.dice,
            it.disc_loss.map_or("-".into(), |d| format!("{d:.4}")),
            it.lr
        ),
        LogRecord::Val(v) => eprintln!("t {:>6}  val dice {:.4}  jaccard {:.4}", v.t, v.dice, v.jaccard),
        LogRecord::Abort { t, reason } => eprintln!("t {t:>6}  aborted: {reason}"),
        _ => {}
    })?;
    if let Some(v) = &summary.final_val {
        println!("final val dice {:.4} over {} volumes", v.dice, v.count);
    }
    if let Some(p) = &summary.checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

pub fn predict(
    checkpoint: &Path,
    volume: &Path,
    out_mask: &Path,
    out_sdm: Option<&Path>,
    threshold: f32,
    nms: bool,
) -> Result<(), Failure> {
    let seg = load_segmenter(checkpoint)?;
    if out_sdm.is_some() && !seg.config().sdm_head {
        return Err(Failure::Invalid("--out-sdm needs a checkpoint with an SDM head".into()));
    }
    existing(volume, "volume")?;
    let (header, data) = load_volume(volume)?;
    let image = data.into_image()?;
    let shape = image.shape();
    let [d, h, w] = shape.dims();
    seg.config().check_input([d, h, w])?;
    let (prob, sdm) = seg.predict(&Tensor::from_vec(&[1, 1, d, h, w], image.as_slice().to_vec()))?;
    let prob = Grid::from_vec(shape, prob.into_data()).expect("output matches input");
    let mut mask = binarize(&prob, threshold);
    if nms {
        mask = largest_component(&mask);
    }
    save_volume(out_mask, &header.id, &VolumeData::Mask(mask))?;
    println!("wrote {}", out_mask.display());
    if let (Some(path), Some(sdm)) = (out_sdm, sdm) {
        let map = SignedDistanceMap {
            shape,
            values: sdm.data().iter().map(|&v| v as f64).collect(),
            normalized: true,
            degenerate: false,
        };
        save_volume(path, &header.id, &VolumeData::Sdm(map))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub enum SplitSel {
    Labeled,
    Unlabeled,
    Val,
    All,
}

pub fn evaluate(checkpoint: &Path, data: &Path, nms: &[bool], split: SplitSel, out: &Path) -> Result<(), Failure> {
    let seg = load_segmenter(checkpoint)?;
    existing(data, "dataset")?;
    let (root, manifest_path) = locate_manifest(data);
    let manifest = read_manifest(&manifest_path)?;
    let s = &manifest.split;
    let ids: Vec<String> = match split {
        SplitSel::Labeled => s.labeled_ids.clone(),
        SplitSel::Unlabeled => s.unlabeled_ids.clone(),
        SplitSel::Val => s.val_ids.clone(),
        SplitSel::All => s.all_ids().cloned().collect(),
    };
    fs::create_dir_all(out).map_err(io(out))?;
    let mut failed = 0;
    for &apply in nms {
        let table: MetricsTable = evaluate_dataset(&seg, &root, &ids, apply);
        let tag = if apply { "on" } else { "off" };
        let text = table.to_text();
        write_text(&out.join(format!("metrics_nms_{tag}.tsv")), &text)?;
        let json = serde_json::to_string_pretty(&table).expect("table serializes");
        write_text(&out.join(format!("metrics_nms_{tag}.json")), &json)?;
        print!("{text}");
        for f in &table.failures {
            eprintln!("failed {}: {}", f.id, f.error);
        }
        failed = failed.max(table.failures.len());
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} volumes could not be evaluated", ids.len())));
    }
    Ok(())
}

pub fn ablation(config: Option<&Path>, data: &Path, seeds: &[u64], out: &Path) -> Result<(), Failure> {
    if seeds.is_empty() {
        return Err(Failure::Invalid("--seeds must list at least one seed".into()));
    }
    let base = match config {
        Some(p) => {
            existing(p, "config")?;
            TrainConfig::parse_toml(&fs::read_to_string(p).map_err(io(p))?)?
        }
        None => TrainConfig::default(),
    };
    for mode in shapeseg::trainer::ABLATION_ARMS {
        base.clone().with_mode(mode).normalized().validate()?;
    }
    existing(data, "dataset")?;
    let dataset = Dataset::load(data)?;
    fs::create_dir_all(out).map_err(io(out))?;
    write_text(&out.join("ablation_config.toml"), &base.to_toml())?;
    let report = run_ablation(&dataset, &base, seeds, Some(out), &mut |r| {
        eprintln!("{} seed {}: val dice {:.4}", r.mode.name(), r.seed, r.dice)
    })?;
    let text = report.to_text();
    write_text(&out.join("ablation.tsv"), &text)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out.join("ablation.json"), &json)?;
    print!("{text}");
    Ok(())
}
