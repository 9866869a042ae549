use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::infer::predict_image;
use super::{seed_everything, triangle_lr, SeedPlan, Sgd, TrainConfig};
use crate::crnet::CrNet;
use crate::data::{hflip_pair, load_sample, resize_pair, validate_split, DatasetManifest, Image, Sample, ScribbleMap};
use crate::metrics::{align_for_eval, MetricReport, SampleMetrics, EvalResolution};
use crate::objectives::{total_loss, LossBreakdown, LossInputs, LossOutput, ViewPair};
use crate::views::{batch_images, sample_view, ViewTransform};
use crate::{Error, Result};

/// Where training samples come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Memory(Vec<Sample>),
    Disk(DatasetManifest),
}

impl DataSource {
    pub fn len(&self) -> usize {
        match self {
            DataSource::Memory(s) => s.len(),
            DataSource::Disk(m) => m.ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, index: usize) -> Result<Cow<'_, Sample>> {
        match self {
            DataSource::Memory(s) => Ok(Cow::Borrowed(&s[index])),
            DataSource::Disk(m) => Ok(Cow::Owned(load_sample(m, &m.ids[index])?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ids: Vec<String>,
    pub breakdown: LossBreakdown,
}

pub struct Trainer {
    config: TrainConfig,
    plan: SeedPlan,
    net: CrNet,
    optimizer: Sgd,
    source: DataSource,
    rng: ChaCha8Rng,
    device: Device,
    step: usize,
    history: Vec<StepLog>,
    metrics: BTreeMap<String, f64>,
}

fn prepare(samples: &[&Sample], size: usize) -> Result<(Vec<Image>, Vec<ScribbleMap>)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut scribbles = Vec::with_capacity(samples.len());
    for s in samples {
        let (img, scr) = resize_pair(&s.image, &s.scribble, size)?;
        images.push(img);
        scribbles.push(scr);
    }
    Ok((images, scribbles))
}

impl Trainer {
    pub fn new(config: TrainConfig, source: DataSource, device: &Device) -> Result<Self> {
        config.validate()?;
        if source.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let plan = seed_everything(config.seed);
        let net = CrNet::new(config.network_config(), config.precision.dtype(), device)?;
        let optimizer = Sgd::new(net.store(), config.momentum, config.weight_decay);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(plan.augment),
            plan,
            net,
            optimizer,
            source,
            device: device.clone(),
            step: 0,
            history: Vec::new(),
            metrics: BTreeMap::new(),
            config,
        })
    }

    /// Opens the configured training split from disk.
    /// Every sample must pass validation first.
    pub fn from_config(config: TrainConfig, device: &Device) -> Result<Self> {
        let manifest = DatasetManifest::open(&config.dataset_root, &config.train_split)?;
        let report = validate_split(&manifest);
        if !report.is_clean() {
            let listed: Vec<String> = report.violations.iter().take(10).map(|v| v.to_string()).collect();
            return Err(Error::InvalidConfig(format!(
                "training split has {} violation(s): {}",
                report.violations.len(),
                listed.join("; ")
            )));
        }
        Trainer::new(config, DataSource::Disk(manifest), device)
    }

    /// Continues a run from a checkpoint written with the same config.
    pub fn resume(config: TrainConfig, source: DataSource, checkpoint: &Path, device: &Device) -> Result<Self> {
        config.validate()?;
        let ckpt = load_checkpoint(checkpoint, device)?;
        if ckpt.meta.config_hash != config.hash() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint {} was written with a different configuration",
                checkpoint.display()
            )));
        }
        let net = ckpt.restore_net(config.precision.dtype(), device)?;
        let optimizer = ckpt.restore_optimizer(&net, config.momentum, config.weight_decay)?;
        Ok(Trainer {
            plan: seed_everything(config.seed),
            net,
            optimizer,
            source,
            rng: ckpt.meta.rng_state.clone(),
            device: device.clone(),
            step: ckpt.meta.step,
            history: Vec::new(),
            metrics: ckpt.meta.metrics.clone(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &CrNet {
        &self.net
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.source.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn epoch_of(&self, step: usize) -> usize {
        step / self.steps_per_epoch()
    }

    /// Sample order of `epoch`, a seeded permutation.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.data);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let order = self.epoch_order(step / spe);
        let start = (step % spe) * self.config.batch_size;
        let end = (start + self.config.batch_size).min(order.len());
        order[start..end].to_vec()
    }

    /// Forward passes and loss for one prepared batch.
    fn loss(&self, images: &[Image], scribbles: &[ScribbleMap], view: Option<&ViewTransform>, epoch: usize, train: bool) -> Result<LossOutput> {
        let refs: Vec<&Image> = images.iter().collect();
        let x = batch_images(&refs, &self.device)?.to_dtype(self.net.store().dtype())?;
        let out = self.net.forward(&x, train)?;
        let cfg = &self.config.loss;
        let pair = match (cfg.use_cv, view) {
            (true, Some(t)) => {
                let transformed = self.net.forward(&t.apply_to_tensor(&x)?, train)?;
                Some(ViewPair {
                    aligned: t.apply_to_tensor(out.main())?,
                    transformed: transformed.main().clone(),
                    valid: t.validity_mask()?,
                })
            }
            _ => None,
        };
        let features = if cfg.use_ss && cfg.w_ss(epoch) > 0.0 {
            let (h, w) = images[0].dims();
            out.feature_maps(h, w)?
        } else {
            Vec::new()
        };
        total_loss(
            &LossInputs {
                outputs: &out.maps,
                features: &features,
                scribbles,
                images,
                view: pair.as_ref(),
                epoch,
            },
            cfg,
        )
    }

    /// One optimisation step on the next batch.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let epoch = self.epoch_of(step);
        let indices = self.batch_indices(step);
        let samples = indices
            .iter()
            .map(|&i| self.source.sample(i))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Sample> = samples.iter().map(|s| s.as_ref()).collect();
        let ids: Vec<String> = refs.iter().map(|s| s.id.clone()).collect();
        let size = self.config.input_size;
        let (mut images, mut scribbles) = prepare(&refs, size)?;
        if self.config.hflip {
            for (img, scr) in images.iter_mut().zip(scribbles.iter_mut()) {
                if self.rng.random_bool(0.5) {
                    (*img, *scr) = hflip_pair(img, scr);
                }
            }
        }
        let view = self
            .config
            .loss
            .use_cv
            .then(|| sample_view(&self.config.views, &mut self.rng, (size, size)));
        let out = self.loss(&images, &scribbles, view.as_ref(), epoch, true)?;
        if !out.breakdown.total.is_finite() {
            log::error!("non-finite loss at step {step} on batch {ids:?}: {:?}", out.breakdown);
            return Err(Error::NonFiniteLoss { step, ids });
        }
        let lr = triangle_lr(step, self.total_steps(), self.config.max_lr);
        let grads = out.total.backward()?;
        self.optimizer.step(self.net.store(), &grads, lr)?;
        self.step += 1;
        let entry = StepLog {
            step,
            epoch,
            lr,
            ids,
            breakdown: out.breakdown,
        };
        self.history.push(entry.clone());
        Ok(entry)
    }

    /// Runs up to `n` steps (stopping at the end of the schedule).
    pub fn run_steps(&mut self, n: usize) -> Result<Vec<StepLog>> {
        let end = (self.step + n).min(self.total_steps());
        let mut logs = Vec::with_capacity(end.saturating_sub(self.step));
        while self.step < end {
            logs.push(self.train_step()?);
        }
        Ok(logs)
    }

    /// Loss breakdown of a fixed batch in evaluation mode (running batch
    /// statistics, no parameter or statistic updates).
    pub fn evaluate_batch(&self, samples: &[Sample], view: Option<&ViewTransform>, epoch: usize) -> Result<LossBreakdown> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let (images, scribbles) = prepare(&refs, self.config.input_size)?;
        Ok(self.loss(&images, &scribbles, view, epoch, false)?.breakdown)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epoch_of(self.step),
            step: self.step,
            rng_state: self.rng.clone(),
            config_hash: self.config.hash(),
            metrics: self.metrics.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<CheckpointMeta> {
        let meta = self.meta();
        save_checkpoint(path, &self.net, &self.optimizer, &self.config, &meta)?;
        Ok(meta)
    }

    /// Scores the validation split (when configured) and records the means.
    pub fn validate(&mut self) -> Result<Option<MetricReport>> {
        let Some(split) = self.config.val_split.clone() else {
            return Ok(None);
        };
        let manifest = DatasetManifest::open(&self.config.dataset_root, &split)?;
        let mut rows = Vec::with_capacity(manifest.ids.len());
        for id in &manifest.ids {
            let sample = load_sample(&manifest, id)?;
            let Some(gt) = &sample.gt_mask else { continue };
            let pred = predict_image(&self.net, &sample.image, self.config.input_size)?;
            let (pred, gt) = align_for_eval(&pred, gt, EvalResolution::Native);
            rows.push(SampleMetrics::compute(id, pred.view(), gt.view())?);
        }
        let report = MetricReport::from_samples(rows);
        self.metrics = BTreeMap::from([
            ("mae".to_string(), report.mae),
            ("s_measure".to_string(), report.s_measure),
            ("e_measure".to_string(), report.e_measure),
            ("weighted_fbeta".to_string(), report.weighted_fbeta),
        ]);
        Ok(Some(report))
    }

    pub fn checkpoint_path(&self, label: &str) -> PathBuf {
        self.config.output_dir.join(format!("{label}.safetensors"))
    }

    /// Trains to the end of the schedule, logging every step to
    /// `train_log.jsonl`, checkpointing on the configured cadence and
    /// writing `final.safetensors`.
    pub fn run(&mut self) -> Result<CheckpointMeta> {
        let out_dir = self.config.output_dir.clone();
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        while self.step < total {
            let entry = self.train_step()?;
            writeln!(log_file, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
            let b = &entry.breakdown;
            log::info!(
                "step {}/{total} epoch {} lr {:.2e} total {:.4} pce {:.4} rcv {:.4} ca {:.4} ss {:.4}",
                entry.step + 1,
                entry.epoch,
                entry.lr,
                b.total,
                b.pce,
                b.rcv,
                b.ca,
                b.ss
            );
            if self.step % spe == 0 {
                let epoch = self.step / spe;
                if self.config.validate_every > 0 && epoch % self.config.validate_every == 0 {
                    if let Some(report) = self.validate()? {
                        log::info!("epoch {epoch} validation\n{}", report.table("val"));
                    }
                }
                if self.config.checkpoint_every > 0 && epoch % self.config.checkpoint_every == 0 {
                    self.save(&self.checkpoint_path(&format!("epoch{epoch:04}")))?;
                }
            }
        }
        self.save(&self.checkpoint_path("final"))
    }
}
