//! Negative SI-SDR training with Adam, plateau halving and resumable state.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::datagen::{rng_for, sub_seed, ExampleRecord, Manifest, Split};
use crate::dsp::CLAMP_DB;
use crate::error::{Error, Result};
use crate::frontends::signal_tensor;
use crate::models::{Checkpoint, Model, Network};
use crate::nn::ParamStore;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

fn default_lr() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    3
}
fn default_factor() -> f64 {
    0.5
}
fn default_segment() -> f64 {
    4.0
}
fn default_batch() -> usize {
    2
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(5.0)
}
fn default_true() -> bool {
    true
}
fn default_dev() -> Split {
    Split::Dev
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_factor")]
    pub lr_factor: f64,
    /// Training crops in seconds.
    #[serde(default = "default_segment")]
    pub segment_seconds: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm ceiling.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Train on each mixture twice, once per speaker.
    #[serde(default = "default_true")]
    pub both_speakers: bool,
    #[serde(default = "default_dev")]
    pub validation_split: Split,
}

impl TrainConfig {
    pub fn new(max_epochs: usize, seed: u64) -> Self {
        Self {
            lr: default_lr(),
            patience: default_patience(),
            lr_factor: default_factor(),
            segment_seconds: default_segment(),
            batch_size: default_batch(),
            max_epochs,
            max_steps: None,
            seed,
            betas: default_betas(),
            eps: default_eps(),
            grad_clip: default_clip(),
            both_speakers: true,
            validation_split: Split::Dev,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return Err(Error::config("lr factor must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("batch size and patience must be positive"));
        }
        if self.segment_seconds <= 0.0 {
            return Err(Error::config("segment length must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::config("gradient clip must be positive"));
        }
        Ok(())
    }
}

/// Mean over the batch of the negative SI-SDR in dB, clamped to
/// `[-CLAMP_DB, CLAMP_DB]`. Both inputs are (B, T).
///
/// The clamp is applied to the energies (the residual is floored at
/// `1e-8` of the projection and the other way round) so the gradient stays
/// finite at a perfect estimate.
pub fn si_sdr_loss(estimate: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, t) = estimate.dims2()?;
    let (bt, tt) = target.dims2()?;
    if t != tt {
        return Err(Error::LengthMismatch(t, tt));
    }
    if b != bt {
        return Err(Error::shape(format!("batch sizes differ: {b} vs {bt}")));
    }
    let energy = target.sqr()?.sum_keepdim(1)?;
    if energy.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().any(|&e| e == 0.0) {
        return Err(Error::ZeroEnergy("target"));
    }
    let alpha = (estimate * target)?.sum_keepdim(1)?.div(&energy)?;
    let proj = target.broadcast_mul(&alpha)?;
    let resid = (estimate - &proj)?;
    let floor = 10f64.powf(-CLAMP_DB / 10.0);
    let p = proj.sqr()?.sum_keepdim(1)?;
    let r = resid.sqr()?.sum_keepdim(1)?;
    let p_c = p.maximum(&r.affine(floor, 0.0)?)?.maximum(1e-30)?;
    let r_c = r.maximum(&p.affine(floor, 0.0)?)?.maximum(1e-30)?;
    let db = (p_c.log()? - r_c.log()?)?.affine(10.0 / std::f64::consts::LN_10, 0.0)?;
    Ok(db.neg()?.mean_all()?)
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub betas: (f64, f64),
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(betas: (f64, f64), eps: f64) -> Self {
        Self {
            betas,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let scale = match clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g.clone() };
            let m = match self.m.get(name) {
                Some(m) => (m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?,
                None => g.affine(1.0 - b1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - b2, 0.0)?,
            };
            let denom = v.sqrt()?.affine(1.0 / bc2.sqrt(), self.eps)?;
            let update = m.div(&denom)?.affine(lr / bc1, 0.0)?;
            var.set(&(var.as_tensor() - update)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(norm)
    }

    fn export(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    fn import(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Manifest(format!("unknown optimizer array {k}")));
            }
        }
        Ok(())
    }
}

/// Halves the rate once the monitored loss has gone `patience` epochs
/// without a new minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's loss and returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_s: f64,
}

/// Everything besides weights and moments that a resumed run needs. All
/// randomness is derived from `(seed, epoch, index)`, so no generator state
/// has to be stored beyond the seed and the counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub step: usize,
    pub best_val: f64,
    pub lr: f64,
    pub seed: u64,
    pub scheduler: Plateau,
    pub adam_step: u64,
    pub history: Vec<EpochMetrics>,
}

/// Offset of the training crop for one example in one epoch.
pub fn crop_seed(seed: u64, epoch: usize, example: usize) -> u64 {
    sub_seed(sub_seed(seed, "crop", epoch as u64), "example", example as u64)
}

/// Crops mixture and target at the same random offset to `segment` samples;
/// shorter pairs pass through unchanged.
pub fn truncate_segment(
    mixture: &AudioSignal,
    target: &AudioSignal,
    segment: usize,
    seed: u64,
) -> Result<(AudioSignal, AudioSignal)> {
    if mixture.len() != target.len() {
        return Err(Error::LengthMismatch(mixture.len(), target.len()));
    }
    if mixture.len() <= segment {
        return Ok((mixture.clone(), target.clone()));
    }
    let offset = rng_for(seed, "offset", 0).gen_range(0..=mixture.len() - segment);
    Ok((mixture.slice(offset, segment)?, target.slice(offset, segment)?))
}

/// Crop attempts before falling back to the whole clip.
const CROP_ATTEMPTS: u64 = 8;

/// Like [`truncate_segment`], but redraws the offset while the target crop
/// carries less than 5% of the target's average energy per sample. Zero-padded
/// tails would otherwise give silent targets.
fn active_crop(
    mixture: &AudioSignal,
    target: &AudioSignal,
    segment: usize,
    seed: u64,
) -> Result<(AudioSignal, AudioSignal)> {
    if mixture.len() <= segment {
        return Ok((mixture.clone(), target.clone()));
    }
    let wanted = 0.05 * target.energy() * segment as f64 / target.len() as f64;
    for attempt in 0..CROP_ATTEMPTS {
        let s = if attempt == 0 { seed } else { sub_seed(seed, "retry", attempt) };
        let (m, t) = truncate_segment(mixture, target, segment, s)?;
        if t.energy() >= wanted && t.energy() > 0.0 {
            return Ok((m, t));
        }
    }
    Ok((mixture.clone(), target.clone()))
}

/// One training or scoring item: a mixture, whom to extract and with which
/// reference.
#[derive(Debug, Clone)]
struct Item<'a> {
    index: usize,
    record: &'a ExampleRecord,
    target_path: &'a str,
    reference_path: String,
}

pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub state: TrainState,
    pub best_checkpoint: PathBuf,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    manifest: &'a Manifest,
    model: Model,
    network: Network,
    adam: Adam,
    state: TrainState,
    out_dir: PathBuf,
}

impl<'a> Trainer<'a> {
    pub fn new(mut model: Model, manifest: &'a Manifest, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<Self> {
        cfg.validate()?;
        if manifest.split(Split::Train).is_empty() {
            return Err(Error::Manifest("no training examples".into()));
        }
        let network = model.tracked_network()?;
        Ok(Self {
            cfg: cfg.clone(),
            manifest,
            model,
            network,
            adam: Adam::new(cfg.betas, cfg.eps),
            state: TrainState {
                epoch: 0,
                step: 0,
                best_val: f64::INFINITY,
                lr: cfg.lr,
                seed: cfg.seed,
                scheduler: Plateau::new(cfg.patience, cfg.lr_factor),
                adam_step: 0,
                history: Vec::new(),
            },
            out_dir: out_dir.as_ref().to_path_buf(),
        })
    }

    /// Continues from a checkpoint written by an earlier run.
    pub fn resume(
        checkpoint: impl AsRef<Path>,
        manifest: &'a Manifest,
        cfg: &TrainConfig,
        out_dir: impl AsRef<Path>,
    ) -> Result<Self> {
        let path = checkpoint.as_ref();
        let ckpt = Checkpoint::read(path)?;
        let state: TrainState = match &ckpt.state {
            Some(s) => serde_json::from_str(s)?,
            None => {
                return Err(Error::CorruptCheckpoint {
                    path: path.to_path_buf(),
                    reason: "no training state".into(),
                })
            }
        };
        if state.seed != cfg.seed {
            return Err(Error::config(format!(
                "checkpoint was trained with seed {}, config says {}",
                state.seed, cfg.seed
            )));
        }
        let model = Model::from_checkpoint(&ckpt, None)?;
        let mut trainer = Self::new(model, manifest, cfg, out_dir)?;
        trainer.adam.import(&ckpt.optimizer, state.adam_step)?;
        trainer.state = state;
        Ok(trainer)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn load(&self, rel: &str) -> Result<AudioSignal> {
        self.manifest.read_audio(rel)
    }

    fn epoch_items(&self, epoch: usize) -> Result<Vec<Item<'a>>> {
        let manifest: &'a Manifest = self.manifest;
        let epoch_seed = sub_seed(self.cfg.seed, "epoch", epoch as u64);
        let refs = manifest.resample_references(epoch_seed)?;
        let mut items = Vec::new();
        for (k, e) in manifest.examples.iter().enumerate() {
            if e.split != Split::Train {
                continue;
            }
            items.push(Item {
                index: k,
                record: e,
                target_path: &e.target_path,
                reference_path: refs[k].target.clone(),
            });
            if self.cfg.both_speakers {
                items.push(Item {
                    index: k + manifest.examples.len(),
                    record: e,
                    target_path: &e.interferer_path,
                    reference_path: refs[k].interferer.clone(),
                });
            }
        }
        items.shuffle(&mut rng_for(self.cfg.seed, "shuffle", epoch as u64));
        Ok(items)
    }

    fn item_loss(&self, network: &Network, item: &Item, epoch: usize, crop: bool) -> Result<Tensor> {
        let dtype = self.model.store().dtype();
        let mixture = self.load(&item.record.mixture_path)?;
        let target = self.load(item.target_path)?;
        let reference = self.load(&item.reference_path)?;
        let (mixture, target) = if crop {
            let segment = (self.cfg.segment_seconds * mixture.sample_rate() as f64).round() as usize;
            active_crop(&mixture, &target, segment, crop_seed(self.cfg.seed, epoch, item.index))?
        } else {
            (mixture, target)
        };
        let est = network.forward(&signal_tensor(&mixture, dtype)?, &signal_tensor(&reference, dtype)?, None)?;
        si_sdr_loss(&est, &signal_tensor(&target, dtype)?)
    }

    /// Mean loss over a split at full length with the stored references.
    pub fn validate(&self, split: Split) -> Result<f64> {
        let records = self.manifest.split(split);
        if records.is_empty() {
            return Err(Error::Manifest(format!("split {} is empty", split.name())));
        }
        let mut total = 0.0;
        for (k, e) in records.iter().enumerate() {
            let item = Item {
                index: k,
                record: e,
                target_path: &e.target_path,
                reference_path: e.reference_path.clone(),
            };
            total += self.item_loss(self.model.network(), &item, 0, false)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total / records.len() as f64)
    }

    fn steps_exhausted(&self) -> bool {
        matches!(self.cfg.max_steps, Some(n) if self.state.step >= n)
    }

    /// Runs one epoch and records its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.state.epoch;
        let items = self.epoch_items(epoch)?;
        let (mut total, mut count) = (0.0, 0usize);
        for batch in items.chunks(self.cfg.batch_size) {
            if self.steps_exhausted() {
                break;
            }
            let mut losses = Vec::with_capacity(batch.len());
            for item in batch {
                losses.push(self.item_loss(&self.network, item, epoch, true)?);
            }
            let loss = (Tensor::stack(&losses, 0)?.sum_all()? / batch.len() as f64)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() || value.abs() > CLAMP_DB + 1e-6 {
                return Err(Error::Diverged {
                    epoch,
                    step: self.state.step,
                    reason: format!("loss {value}"),
                });
            }
            let grads = loss.backward()?;
            self.adam
                .step(self.model.store(), &grads, self.state.lr, self.cfg.grad_clip)
                .map_err(|e| Error::Diverged {
                    epoch,
                    step: self.state.step,
                    reason: e.to_string(),
                })?;
            self.state.step += 1;
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let val_loss = self.validate(self.cfg.validation_split)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: self.state.step,
                reason: format!("validation loss {val_loss}"),
            });
        }
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: if count > 0 { total / count as f64 } else { f64::NAN },
            val_loss,
            lr: self.state.lr,
            wall_s: start.elapsed().as_secs_f64(),
        };
        self.state.lr = self.state.scheduler.observe(val_loss, self.state.lr);
        self.state.epoch += 1;
        self.state.adam_step = self.adam.step;
        self.state.history.push(metrics.clone());
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        if val_loss < self.state.best_val {
            self.state.best_val = val_loss;
            self.checkpoint()?.write(self.out_dir.join(BEST_CHECKPOINT))?;
        }
        self.checkpoint()?.write(self.out_dir.join(LAST_CHECKPOINT))?;
        self.write_metrics()?;
        Ok(metrics)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.model.checkpoint(self.state.step as u64)?;
        ckpt.optimizer = self.adam.export();
        ckpt.state = Some(serde_json::to_string(&self.state)?);
        Ok(ckpt)
    }

    fn write_metrics(&self) -> Result<()> {
        let path = self.out_dir.join(METRICS_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for m in &self.state.history {
            writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Trains until `max_epochs` or `max_steps`.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.state.epoch < self.cfg.max_epochs && !self.steps_exhausted() {
            self.run_epoch()?;
        }
        Ok(TrainOutcome {
            history: self.state.history.clone(),
            state: self.state,
            best_checkpoint: self.out_dir.join(BEST_CHECKPOINT),
            model: self.model,
        })
    }
}

pub fn train(model: Model, manifest: &Manifest, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    Trainer::new(model, manifest, cfg, out_dir)?.run()
}
