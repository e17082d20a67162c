use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_training, TrainConfig, TrainError, TrainMode};
use crate::synthdata::Dataset;

/// Arms in table order: plain segmenter, with SDM head, with SDM head and discriminator.
pub const ABLATION_ARMS: [TrainMode; 3] = [TrainMode::Supervised, TrainMode::SupervisedSdm, TrainMode::Full];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: TrainMode,
    pub seed: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub mode: TrainMode,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub runs: Vec<AblationRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    pub fn arm(&self, mode: TrainMode) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("mode\tseed\tDice[%]\tJaccard[%]\tASD[voxel]\t95HD[voxel]\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for arm in &self.arms {
            for r in &arm.runs {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{:.2}\t{:.2}\t{}\t{}",
                    arm.mode.name(),
                    r.seed,
                    100.0 * r.dice,
                    100.0 * r.jaccard,
                    opt(r.asd),
                    opt(r.hd95)
                );
            }
        }
        for arm in &self.arms {
            let _ = writeln!(
                out,
                "{}\tmean\t{:.2}\t{:.2}\t-\t-",
                arm.mode.name(),
                100.0 * arm.mean_dice,
                100.0 * arm.mean_jaccard
            );
        }
        out
    }
}

/// Trains every arm once per seed from `base`, scoring the final model on the
/// validation split. With `out_dir`, each run writes to `{mode}_seed{seed}/`.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&AblationRun),
) -> Result<AblationReport, TrainError> {
    let mut arms = Vec::new();
    for mode in ABLATION_ARMS {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..base.clone().with_mode(mode).normalized() };
            let dir = out_dir.map(|d| d.join(format!("{}_seed{seed}", mode.name().replace('+', "_"))));
            let (_, summary, _) = run_training(dataset, &cfg, dir.as_deref())?;
            let mean = summary.final_val.expect("training ends with a validation pass");
            let run = AblationRun {
                mode,
                seed,
                dice: mean.dice,
                jaccard: mean.jaccard,
                asd: mean.asd,
                hd95: mean.hd95,
            };
            progress(&run);
            runs.push(run);
        }
        let n = runs.len().max(1) as f64;
        arms.push(AblationArm {
            mode,
            mean_dice: runs.iter().map(|r| r.dice).sum::<f64>() / n,
            mean_jaccard: runs.iter().map(|r| r.jaccard).sum::<f64>() / n,
            runs,
        });
    }
    Ok(AblationReport { arms })
}
