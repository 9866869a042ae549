//! Training configuration, the training loop, checkpoints, inference and
//! evaluation entry points.

mod checkpoint;
mod infer;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use infer::{infer, predict_image, InferReport};
pub use optim::Sgd;
pub use train::{DataSource, StepLog, Trainer};

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crnet::CrNetConfig;
use crate::data::MIN_SIDE;
use crate::metrics::{evaluate_dataset, EvalResolution, MetricReport};
use crate::objectives::LossConfig;
use crate::views::ViewConfig;
use crate::{Error, Result};

/// Environment variable naming the compute device. Only `cpu` is built in.
pub const DEVICE_ENV: &str = "SCOD_DEVICE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Training run configuration. Read from TOML; every key is optional and
/// nested tables `loss`, `views` and `net` carry the component settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_root: PathBuf,
    pub train_split: String,
    pub val_split: Option<String>,
    pub input_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the run (and the schedule length) at this many steps.
    pub max_steps: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_lr: f64,
    pub seed: u64,
    pub hflip: bool,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Score the validation split every this many epochs; 0 disables it.
    pub validate_every: usize,
    pub loss: LossConfig,
    pub views: ViewConfig,
    pub net: CrNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: None,
            input_size: 320,
            batch_size: 16,
            epochs: 150,
            max_steps: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_lr: 1e-3,
            seed: 0,
            hflip: true,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 10,
            validate_every: 0,
            loss: LossConfig::default(),
            views: ViewConfig::default(),
            net: CrNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if self.input_size < MIN_SIDE {
            return bad(format!("input_size {} below the {MIN_SIDE}px minimum", self.input_size));
        }
        self.loss.validate()?;
        self.views.validate()?;
        if self.loss.use_cv {
            self.views.validate_for_consistency()?;
            let smallest = self.views.scales.iter().copied().fold(f64::INFINITY, f64::min);
            if ((self.input_size as f64 * smallest).round() as usize) < MIN_SIDE {
                return bad(format!(
                    "the smallest transformed view of a {}px input falls below {MIN_SIDE}px",
                    self.input_size
                ));
            }
        }
        self.network_config().validate(self.loss.use_ss.then_some(self.loss.top_channels))
    }

    /// Network settings with the run's input size and derived init seed.
    pub fn network_config(&self) -> CrNetConfig {
        CrNetConfig {
            input_size: self.input_size,
            seed: seed_everything(self.seed).init,
            ..self.net.clone()
        }
    }

    /// Digest of every setting that shapes the optimisation trajectory.
    /// Output location and checkpoint/validation cadence are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.checkpoint_every = 0;
        c.validate_every = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Learning rate at `step`: linear ramp from 0 to `max_lr` at the midpoint,
/// then linear decay back to 0 at `total_steps`.
pub fn triangle_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let t = total_steps as f64;
    max_lr * (1.0 - (2.0 * step / t - 1.0).abs())
}

/// Independent seeds for each random stream of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    /// Parameter initialization.
    pub init: u64,
    /// Per-epoch sample order.
    pub data: u64,
    /// Flip augmentation and view sampling.
    pub augment: u64,
}

/// Derives every random stream from one seed. The CPU backend is
/// deterministic, so no further global state needs fixing.
pub fn seed_everything(seed: u64) -> SeedPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SeedPlan {
        init: rng.next_u64(),
        data: rng.next_u64(),
        augment: rng.next_u64(),
    }
}

/// Resolves the compute device from `SCOD_DEVICE` (unset or `cpu`).
pub fn device_from_env() -> Result<Device> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok(Device::Cpu),
        Ok(v) => Err(Error::InvalidConfig(format!(
            "{DEVICE_ENV}={v} is not supported; this build runs on cpu"
        ))),
    }
}

/// Scores a prediction directory against ground truth.
pub fn eval_cmd(pred_dir: &Path, gt_dir: &Path, resolution: EvalResolution) -> Result<MetricReport> {
    evaluate_dataset(pred_dir, gt_dir, resolution)
}
