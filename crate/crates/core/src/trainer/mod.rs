//! Alternating min-max training: one segmenter update with the discriminator frozen,
//! then one discriminator update on detached SDM predictions, per iteration.

mod ablation;
mod config;
mod optim;
mod steps;

pub use ablation::{run_ablation, AblationArm, AblationReport, AblationRun, ABLATION_ARMS};
pub use config::{lr_schedule, TrainConfig, TrainMode};
pub use optim::{Adam, Sgd};
pub use steps::{
    discriminator_step, sample_batch, segmenter_objective, segmenter_step, Batch, Schedule, SegObjective,
    SegStepReport,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::derive_seed;
use crate::evalmetrics::{evaluate_volume, MetricsTable};
use crate::losses::beta_schedule;
use crate::segnet::{Archive, Discriminator, Segmenter};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;
use crate::voxelgeom::Grid;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("non-finite {what} at iteration {t}")]
    NonFinite { t: u64, what: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// One training iteration. `t` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub t: u64,
    pub dice: f64,
    pub sdm_mse: Option<f64>,
    pub adversarial: Option<f64>,
    pub seg_loss: f64,
    pub disc_loss: Option<f64>,
    pub beta: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub t: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iter(IterationLog),
    Val(ValidationLog),
    Checkpoint { t: u64, path: String },
    Abort { t: u64, reason: String },
}

impl LogRecord {
    /// The record with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> LogRecord {
        match self {
            LogRecord::Iter(it) => LogRecord::Iter(IterationLog { wall_ms: 0.0, ..it.clone() }),
            other => other.clone(),
        }
    }
}

/// Model, optimizer state and iteration counter.
pub struct Trainer {
    pub config: TrainConfig,
    pub seg: Segmenter,
    pub disc: Discriminator,
    sgd: Sgd,
    adam: Adam,
    t: u64,
}

const SEG_INIT_STREAM: u64 = 1 << 40;
const DISC_INIT_STREAM: u64 = 1 << 41;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let seg = Segmenter::new(config.segmenter.clone(), derive_seed(config.seed, SEG_INIT_STREAM))
            .map_err(|e| TrainError::Config { key: "segmenter".into(), message: e.to_string() })?;
        let disc = Discriminator::new(config.discriminator.clone(), derive_seed(config.seed, DISC_INIT_STREAM))
            .map_err(|e| TrainError::Config { key: "discriminator".into(), message: e.to_string() })?;
        let sgd = Sgd::new(seg.params(), config.momentum as f32, config.weight_decay as f32);
        let [b1, b2] = config.adam_betas;
        let adam = Adam::new(disc.params(), b1 as f32, b2 as f32);
        Ok(Self { config, seg, disc, sgd, adam, t: 0 })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn checkpoint(&self) -> Archive {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        let meta = json!({
            "kind": "training",
            "t": self.t,
            "mode": self.config.mode.name(),
            "adam_steps": self.adam.steps_taken(),
            // batches are drawn from derive_seed(seed, t), so this is the whole RNG state
            "rng": { "seed": self.config.seed, "next_iteration": self.t + 1 },
        });
        let mut a = Archive::new(config, meta);
        a.extend_prefixed("seg", self.seg.params().named());
        a.extend_prefixed("disc", self.disc.params().named());
        self.sgd.save(self.seg.params(), &mut a, "sgd");
        self.adam.save(self.disc.params(), &mut a, "adam");
        a
    }

    /// Restores a checkpoint. A supplied `config` may change schedules and run length
    /// but not the architectures.
    pub fn from_checkpoint(archive: &Archive, config: Option<TrainConfig>) -> Result<Self, TrainError> {
        let ck = |e: String| TrainError::Checkpoint(e);
        let stored: TrainConfig = serde_json::from_value(archive.config.clone()).map_err(|e| ck(e.to_string()))?;
        let config = match config {
            Some(c) => {
                if c.segmenter != stored.segmenter || c.discriminator != stored.discriminator || c.mode != stored.mode {
                    return Err(ck("config architecture or mode differs from the checkpoint".into()));
                }
                c
            }
            None => stored,
        };
        let mut tr = Trainer::new(config)?;
        tr.seg = Segmenter::from_archive(archive).map_err(|e| ck(e.to_string()))?;
        tr.disc = Discriminator::from_archive(archive).map_err(|e| ck(e.to_string()))?;
        let meta_u64 = |key: &str| {
            archive
                .meta
                .get(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| ck(format!("checkpoint meta lacks `{key}`")))
        };
        tr.t = meta_u64("t")?;
        let adam_steps = meta_u64("adam_steps")?;
        tr.sgd.restore(tr.seg.params(), archive, "sgd").map_err(ck)?;
        tr.adam.restore(tr.disc.params(), archive, "adam", adam_steps).map_err(ck)?;
        Ok(tr)
    }

    /// Runs iteration `t + 1`: segmenter step, then discriminator step.
    pub fn step(&mut self, dataset: &Dataset) -> Result<IterationLog, TrainError> {
        let start = Instant::now();
        let t = self.t + 1;
        let batch = sample_batch(dataset, &self.config, t)?;
        let beta = if self.config.mode.adversarial() {
            beta_schedule(t, self.config.warmup_end(), self.config.beta_max)
        } else {
            0.0
        };
        let lr = lr_schedule(t, &self.config);
        let sched = Schedule { t, beta, lr };
        let (report, detached_sdm) = segmenter_step(&mut self.seg, &mut self.sgd, &self.disc, &batch, &self.config, sched)?;
        let disc_loss = match detached_sdm {
            Some(s) if self.config.mode.adversarial() => Some(discriminator_step(
                &mut self.disc,
                &mut self.adam,
                &batch.images(),
                &s,
                batch.labeled.len(),
                self.config.disc_lr as f32,
                t,
            )?),
            _ => None,
        };
        self.t = t;
        Ok(IterationLog {
            t,
            dice: report.dice,
            sdm_mse: report.mse,
            adversarial: report.adversarial,
            seg_loss: report.total,
            disc_loss,
            beta,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Scores the validation split on full volumes, without NMS.
    pub fn validate(&self, dataset: &Dataset) -> Result<MetricsTable, TrainError> {
        validate_segmenter(&self.seg, dataset, false)
    }

    /// Trains until `config.total_iters`, streaming records to `sink` and, with
    /// `out_dir`, to a JSON-lines log, periodic checkpoints and a final checkpoint.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        sink: &mut dyn FnMut(&LogRecord),
    ) -> Result<TrainSummary, TrainError> {
        let mut log = match out_dir {
            Some(dir) => Some(LogWriter::open(dir, &self.config)?),
            None => None,
        };
        let mut emit = |rec: LogRecord, log: &mut Option<LogWriter>| -> Result<(), TrainError> {
            if let Some(l) = log.as_mut() {
                l.write(&rec)?;
            }
            sink(&rec);
            Ok(())
        };
        let mut last_val = None;
        while self.t < self.config.total_iters {
            let rec = match self.step(dataset) {
                Ok(rec) => rec,
                Err(TrainError::NonFinite { t, what }) => {
                    let reason = format!("non-finite {what}");
                    // losses are checked before each update is applied, so the live state
                    // holds the parameters that produced the bad value
                    if let Some(dir) = out_dir {
                        let path = dir.join(ABORT_CHECKPOINT);
                        self.checkpoint().save(&path).map_err(|e| TrainError::Io(e.to_string()))?;
                        emit(LogRecord::Checkpoint { t: t - 1, path: path.display().to_string() }, &mut log)?;
                    }
                    emit(LogRecord::Abort { t, reason }, &mut log)?;
                    return Err(TrainError::NonFinite { t, what });
                }
                Err(e) => return Err(e),
            };
            emit(LogRecord::Iter(rec), &mut log)?;
            let t = self.t;
            let every = |k: u64| k > 0 && t.is_multiple_of(k);
            if every(self.config.val_every) || t == self.config.total_iters {
                let table = self.validate(dataset)?;
                let v = ValidationLog {
                    t,
                    dice: table.mean.dice,
                    jaccard: table.mean.jaccard,
                    asd: table.mean.asd,
                    hd95: table.mean.hd95,
                    count: table.mean.count,
                };
                last_val = Some(v.clone());
                emit(LogRecord::Val(v), &mut log)?;
            }
            if let Some(dir) = out_dir {
                if every(self.config.checkpoint_every) && t < self.config.total_iters {
                    let path = dir.join(format!("checkpoint_{t:06}.ckpt"));
                    self.checkpoint().save(&path).map_err(|e| TrainError::Io(e.to_string()))?;
                    emit(LogRecord::Checkpoint { t, path: path.display().to_string() }, &mut log)?;
                }
            }
        }
        let final_path = match out_dir {
            Some(dir) => {
                let path = dir.join(FINAL_CHECKPOINT);
                self.checkpoint().save(&path).map_err(|e| TrainError::Io(e.to_string()))?;
                emit(LogRecord::Checkpoint { t: self.t, path: path.display().to_string() }, &mut log)?;
                Some(path)
            }
            None => None,
        };
        Ok(TrainSummary { iterations: self.t, final_val: last_val, checkpoint: final_path })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_val: Option<ValidationLog>,
    pub checkpoint: Option<PathBuf>,
}

/// Fresh run of `config` on `dataset`, collecting every record.
pub fn run_training(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Trainer, TrainSummary, Vec<LogRecord>), TrainError> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut records = Vec::new();
    let summary = trainer.run(dataset, out_dir, &mut |r| records.push(r.clone()))?;
    Ok((trainer, summary, records))
}

/// Full-volume metrics of `seg` over the validation ids held in memory.
pub fn validate_segmenter(seg: &Segmenter, dataset: &Dataset, apply_nms: bool) -> Result<MetricsTable, TrainError> {
    let mut rows = Vec::new();
    for id in &dataset.split().val_ids {
        let sample = dataset.sample(id);
        let [d, h, w] = sample.volume.shape().dims();
        let x = Tensor::from_vec(&[1, 1, d, h, w], sample.volume.as_slice().to_vec());
        let (prob, _) = seg.predict(&x).map_err(|e| TrainError::Data(e.to_string()))?;
        let prob = Grid::from_vec(sample.volume.shape(), prob.into_data()).expect("output matches input");
        rows.push(evaluate_volume(id, &prob, &sample.mask, apply_nms).map_err(|e| TrainError::Data(e.to_string()))?);
    }
    Ok(MetricsTable::from_rows(apply_nms, rows, Vec::new()))
}

struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    fn open(dir: &Path, config: &TrainConfig) -> Result<Self, TrainError> {
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join(CONFIG_ECHO), config.to_toml()).map_err(io)?;
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(LOG_FILE))
            .map_err(io)?;
        Ok(Self { file })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| TrainError::Io(e.to_string()))
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Io(format!("{}: {e}", path.display()))))
        .collect()
}
