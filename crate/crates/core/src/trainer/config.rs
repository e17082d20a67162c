use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::segnet::{DiscriminatorConfig, SegmenterConfig};
use crate::voxelgeom::VolumeShape;

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Single-head segmenter, dice loss on labeled crops only.
    #[serde(rename = "supervised")]
    Supervised,
    /// Dual-head segmenter with dice and SDM regression, no discriminator.
    #[serde(rename = "supervised+sdm")]
    SupervisedSdm,
    /// Dual-head segmenter trained against the discriminator on unlabeled crops.
    #[serde(rename = "full")]
    Full,
}

impl TrainMode {
    pub fn adversarial(self) -> bool {
        self == TrainMode::Full
    }

    pub fn sdm_head(self) -> bool {
        self != TrainMode::Supervised
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::SupervisedSdm => "supervised+sdm",
            TrainMode::Full => "full",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervised" => Ok(TrainMode::Supervised),
            "supervised+sdm" => Ok(TrainMode::SupervisedSdm),
            "full" => Ok(TrainMode::Full),
            other => Err(format!("unknown mode {other:?} (expected supervised, supervised+sdm or full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub total_iters: u64,
    pub seg_lr: f64,
    /// Multiplicative learning-rate decay applied every `seg_lr_step` iterations.
    pub seg_lr_decay: f64,
    pub seg_lr_step: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub disc_lr: f64,
    pub adam_betas: [f64; 2],
    pub batch_size: usize,
    /// Labeled crops per batch in adversarial mode; the other modes fill the batch with labeled crops.
    pub labeled_per_batch: usize,
    pub alpha: f64,
    pub beta_max: f64,
    /// End of the adversarial warm-up; defaults to `total_iters`.
    pub beta_t_max: Option<u64>,
    /// Training crop `[d, h, w]`.
    pub crop: [usize; 3],
    pub flip: bool,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// 0 disables periodic validation.
    pub val_every: u64,
    pub segmenter: SegmenterConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Full,
            total_iters: 6000,
            seg_lr: 0.01,
            seg_lr_decay: 0.1,
            seg_lr_step: 2500,
            momentum: 0.9,
            weight_decay: 1e-4,
            disc_lr: 1e-4,
            adam_betas: [0.9, 0.999],
            batch_size: 4,
            labeled_per_batch: 2,
            alpha: 0.3,
            beta_max: 0.001,
            beta_t_max: None,
            crop: [32, 32, 32],
            flip: true,
            seed: 0,
            checkpoint_every: 1000,
            val_every: 200,
            segmenter: SegmenterConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> TrainError {
    TrainError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let config = Self::parse_toml(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Parses without validating, for callers that adjust the config first.
    pub fn parse_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Parse(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.mode = mode;
        self
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_iters < 1 {
            return Err(bad("total_iters", "must be at least 1"));
        }
        if !(self.seg_lr > 0.0 && self.seg_lr.is_finite()) {
            return Err(bad("seg_lr", "must be positive"));
        }
        if !(self.seg_lr_decay > 0.0 && self.seg_lr_decay <= 1.0) {
            return Err(bad("seg_lr_decay", "must lie in (0, 1]"));
        }
        if self.seg_lr_step == 0 {
            return Err(bad("seg_lr_step", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be non-negative"));
        }
        if !(self.disc_lr > 0.0 && self.disc_lr.is_finite()) {
            return Err(bad("disc_lr", "must be positive"));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(bad("adam_betas", "both betas must lie in [0, 1)"));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.mode.adversarial() && !(1..self.batch_size).contains(&self.labeled_per_batch) {
            return Err(bad(
                "labeled_per_batch",
                format!("must satisfy 1 <= labeled_per_batch < batch_size = {}", self.batch_size),
            ));
        }
        if !(self.alpha >= 0.0) {
            return Err(bad("alpha", "must be non-negative"));
        }
        if !(self.beta_max >= 0.0) {
            return Err(bad("beta_max", "must be non-negative"));
        }
        let [d, h, w] = self.crop;
        VolumeShape::new(d, h, w).map_err(|_| bad("crop", "every dimension must be positive"))?;
        self.segmenter
            .validate()
            .map_err(|e| bad("segmenter", e.to_string()))?;
        self.segmenter
            .check_input(self.crop)
            .map_err(|e| bad("crop", e.to_string()))?;
        if self.segmenter.sdm_head != self.mode.sdm_head() {
            return Err(bad(
                "segmenter.sdm_head",
                format!("mode {} requires sdm_head = {}", self.mode.name(), self.mode.sdm_head()),
            ));
        }
        self.discriminator
            .validate()
            .map_err(|e| bad("discriminator", e.to_string()))?;
        Ok(())
    }

    /// Forces the head layout implied by the mode.
    pub fn normalized(mut self) -> Self {
        self.segmenter.sdm_head = self.mode.sdm_head();
        self
    }

    pub fn crop_shape(&self) -> VolumeShape {
        let [d, h, w] = self.crop;
        VolumeShape::new(d, h, w).expect("validated crop")
    }

    pub fn warmup_end(&self) -> u64 {
        self.beta_t_max.unwrap_or(self.total_iters)
    }

    /// Labeled crops per batch in the current mode.
    pub fn labeled_in_batch(&self) -> usize {
        if self.mode.adversarial() {
            self.labeled_per_batch
        } else {
            self.batch_size
        }
    }
}

/// `seg_lr * seg_lr_decay^floor(t / seg_lr_step)`.
pub fn lr_schedule(t: u64, config: &TrainConfig) -> f64 {
    config.seg_lr * config.seg_lr_decay.powi((t / config.seg_lr_step) as i32)
}
