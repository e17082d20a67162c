use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Semi-supervised volumetric segmentation with a signed distance shape prior.
#[derive(Parser, Debug)]
#[command(name = "shapeseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a labeled / unlabeled / validation split.
    GenData {
        #[arg(long)]
        count: usize,
        /// Volume shape, `N` for a cube or `DxHxW`.
        #[arg(long, default_value = "48", value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long)]
        labeled: usize,
        #[arg(long)]
        unlabeled: usize,
        #[arg(long)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian noise standard deviation before min-max scaling.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized signed distance map of a mask file.
    ComputeSdm {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter; writes logs and checkpoints into `--out`.
    Train {
        /// TOML training config. Optional with `--resume`, which then reuses the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory or its `split.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment one image volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        /// Needs a checkpoint with an SDM head.
        #[arg(long)]
        out_sdm: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Keep only the largest connected component of the mask.
        #[arg(long)]
        nms: bool,
    },
    /// Score a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Nms::Both)]
        nms: Nms,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the three ablation arms over several seeds and tabulate validation scores.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Supervised,
    #[value(name = "supervised+sdm")]
    SupervisedSdm,
    Full,
}

impl From<Mode> for shapeseg::trainer::TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Supervised => Self::Supervised,
            Mode::SupervisedSdm => Self::SupervisedSdm,
            Mode::Full => Self::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Nms {
    On,
    Off,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Labeled,
    Unlabeled,
    Val,
    All,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dimension {p:?} in shape {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    match nums[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("shape {s:?} must be N or DxHxW")),
    }
}

/// Exit 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

pub fn existing(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData {
            count,
            shape,
            labeled,
            unlabeled,
            val,
            seed,
            noise,
            out,
        } => commands::gen_data(count, shape, (labeled, unlabeled, val), seed, noise, &out),
        Command::ComputeSdm { mask, out } => commands::compute_sdm(&mask, &out),
        Command::Train {
            config,
            data,
            out,
            mode,
            resume,
        } => commands::train(config.as_deref(), &data, &out, mode.map(Into::into), resume.as_deref()),
        Command::Predict {
            checkpoint,
            volume,
            out_mask,
            out_sdm,
            threshold,
            nms,
        } => commands::predict(&checkpoint, &volume, &out_mask, out_sdm.as_deref(), threshold, nms),
        Command::Evaluate {
            checkpoint,
            data,
            nms,
            split,
            out,
        } => {
            let modes = match nms {
                Nms::On => vec![true],
                Nms::Off => vec![false],
                Nms::Both => vec![false, true],
            };
            let split = match split {
                Split::Labeled => commands::SplitSel::Labeled,
                Split::Unlabeled => commands::SplitSel::Unlabeled,
                Split::Val => commands::SplitSel::Val,
                Split::All => commands::SplitSel::All,
            };
            commands::evaluate(&checkpoint, &data, &modes, split, &out)
        }
        Command::Ablation { config, data, seeds, out } => commands::ablation(config.as_deref(), &data, &seeds, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
