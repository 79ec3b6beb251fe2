//! Masked training of the control branch against the frozen backbone, plus
//! the unmasked pretraining of the backbone, with gradient accumulation,
//! checkpointing and resume.

mod checkpoint;
mod config;
mod gradcheck;
mod loss;
mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Checksums, Header, OptimizerState, Progress, RngState, ScheduleParams, CHECKPOINT_VERSION};
pub use config::{TrainConfig, TrainTarget};
pub use gradcheck::{backbone_gradient_check, gradient_check, random_coords, GradCheck, GRAD_FLOOR};
pub use loss::{loss_backbone, masked_item_loss, masked_loss, ItemLoss};
pub use optim::{Adam, AdamHyper};

use crate::control::{inject, BranchConditioning, ControlBranch, ControlScales};
use crate::diffusion::sampler::gaussian;
use crate::diffusion::{LatentCodec, NoiseSchedule, PixelCodec, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{full_mask, Model};
use crate::params::{Binder, ParamStore};
use crate::scenegen::{Dataset, Sample, Split, StyleImageSet};
use crate::tensor::{Float, Tensor};

/// Branch conditioning input: per-image tokens still to be reduced, or
/// final tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum CondInput<T> {
    Locals(Vec<Tensor<T>>),
    Tokens(Tensor<T>),
}

/// One training example with its random draws fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem<T> {
    pub z0: Tensor<T>,
    pub noise: Tensor<T>,
    pub t: usize,
    pub text: Tensor<T>,
    pub cond: CondInput<T>,
    pub pose: Tensor<T>,
    pub mask: Vec<u8>,
}

impl TrainItem<f32> {
    pub fn cast<U: Float>(&self) -> TrainItem<U> {
        TrainItem {
            z0: self.z0.cast(),
            noise: self.noise.cast(),
            t: self.t,
            text: self.text.cast(),
            cond: match &self.cond {
                CondInput::Locals(l) => CondInput::Locals(l.iter().map(Tensor::cast).collect()),
                CondInput::Tokens(t) => CondInput::Tokens(t.cast()),
            },
            pose: self.pose.cast(),
            mask: self.mask.clone(),
        }
    }
}

/// Which masks the branch objective applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskFlags {
    pub no_feature_mask: bool,
    pub no_loss_mask: bool,
}

impl MaskFlags {
    pub fn of(cfg: &TrainConfig) -> Self {
        Self { no_feature_mask: cfg.no_feature_mask, no_loss_mask: cfg.no_loss_mask }
    }
}

/// Draw timestep, noise and condition dropout for one sample. Every draw is
/// made whether or not it is used, so the stream layout is fixed.
pub fn prepare_item(
    model: &Model,
    sample: &Sample,
    conditioning: Option<BranchConditioning>,
    rng: &mut ChaCha8Rng,
    dropout: f64,
) -> Result<TrainItem<f32>> {
    let t = rng.random_range(0..model.schedule.steps());
    let z0 = PixelCodec.encode(&sample.image.to_chw());
    let noise = gaussian(rng, z0.shape());
    let drop_text = rng.random::<f64>() < dropout;
    let drop_visual = rng.random::<f64>() < dropout;
    let prompt = if drop_text { "" } else { sample.text_label.as_str() };
    let text = model.encode_text(prompt)?.tokens;
    let blank;
    let set = if drop_visual {
        blank = StyleImageSet::blank();
        &blank
    } else {
        &sample.style_set
    };
    let cond = match conditioning {
        None => CondInput::Tokens(Tensor::zeros(&[0])),
        Some(BranchConditioning::Local) => {
            CondInput::Locals(model.style.encode_set(set)?.into_iter().map(|l| l.tokens).collect())
        }
        Some(BranchConditioning::Global) => CondInput::Tokens(model.style.encode_global(set)?.tokens),
        Some(BranchConditioning::Text) => {
            let p = if drop_visual { "" } else { sample.text_label.as_str() };
            CondInput::Tokens(model.encode_text(p)?.tokens)
        }
    };
    Ok(TrainItem { z0, noise, t, text, cond, pose: sample.pose_map.to_chw(), mask: sample.human_mask.clone() })
}

fn finite<T: Float>(loss: T, what: &str, t: usize) -> Result<T> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Training(format!("non-finite loss {loss:?} for {what} at timestep {t}")))
    }
}

/// Masked loss of one item through branch and frozen backbone. With `acc`,
/// the item's gradient is added into it (aligned with the branch store).
/// `None` when the item's mask is empty.
#[allow(clippy::too_many_arguments)]
pub fn branch_item_loss<T: Float>(
    unet: &UNet,
    backbone: &ParamStore<T>,
    net: &ControlBranch,
    store: &ParamStore<T>,
    schedule: &NoiseSchedule,
    item: &TrainItem<T>,
    flags: MaskFlags,
    acc: Option<&mut [Tensor<T>]>,
) -> Result<Option<T>> {
    let zt = schedule.q_sample(&item.z0, item.t, &item.noise)?;
    let mut g = Graph::new();
    let mut pb = Binder::new(store, acc.is_some());
    let mut pf = Binder::frozen(backbone);
    let z = g.input(zt);
    let pose = g.input(item.pose.clone());
    let text = g.input(item.text.clone());
    let ctx = match &item.cond {
        CondInput::Locals(l) => net.reduction.forward(&mut g, &mut pb, l),
        CondInput::Tokens(t) => g.input(t.clone()),
    };
    let feats = net.features(&mut g, &mut pb, z, item.t, pose, ctx)?;
    let fmask = (!flags.no_feature_mask).then_some(item.mask.as_slice());
    let taps = inject(&mut g, &feats, fmask, &ControlScales::ones());
    let out = unet.forward(&mut g, &mut pf, z, item.t, text, Some(&taps))?;
    let full;
    let lmask = if flags.no_loss_mask {
        full = full_mask();
        &full
    } else {
        &item.mask
    };
    let Some(l) = masked_item_loss(&item.noise, g.value(out), lmask)? else {
        return Ok(None);
    };
    finite(l.loss, "branch item", item.t)?;
    if let Some(acc) = acc {
        let grads = g.backward(out, l.grad);
        pb.accumulate(&grads, acc);
    }
    Ok(Some(l.loss))
}

/// Unmasked loss of one item through the backbone alone.
pub fn backbone_item_loss<T: Float>(
    unet: &UNet,
    store: &ParamStore<T>,
    schedule: &NoiseSchedule,
    item: &TrainItem<T>,
    acc: Option<&mut [Tensor<T>]>,
) -> Result<T> {
    let zt = schedule.q_sample(&item.z0, item.t, &item.noise)?;
    let mut g = Graph::new();
    let mut p = Binder::new(store, acc.is_some());
    let z = g.input(zt);
    let text = g.input(item.text.clone());
    let out = unet.forward(&mut g, &mut p, z, item.t, text, None)?;
    let l = masked_item_loss(&item.noise, g.value(out), &full_mask())?.expect("full mask");
    finite(l.loss, "backbone item", item.t)?;
    if let Some(acc) = acc {
        let grads = g.backward(out, l.grad);
        p.accumulate(&grads, acc);
    }
    Ok(l.loss)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: String,
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub items: usize,
    pub timestamp: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    /// Mean over micro-batches of the micro-batch mean loss.
    pub loss: f64,
    pub items: usize,
}

/// Training state over a model whose trained store is the branch (or the
/// backbone when pretraining).
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    dataset: &'a Dataset,
    indices: Vec<usize>,
}

impl<'a> Trainer<'a> {
    /// Attach a fresh branch (seeded by `cfg.seed`) unless pretraining.
    pub fn new(cfg: &TrainConfig, mut model: Model, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let n = model.unet.cfg.image_size;
        let first = dataset.get(0)?;
        if first.image.width != n {
            return Err(Error::validation("dataset", format!("images are {}px, model expects {n}px", first.image.width)));
        }
        if cfg.target == TrainTarget::Branch {
            model.attach_branch(cfg.seed, cfg.conditioning())?;
        }
        let mut indices = dataset.split(Split::Train);
        if let Some(m) = cfg.max_samples {
            indices.truncate(m);
        }
        if indices.is_empty() {
            return Err(Error::validation("dataset", "training split is empty"));
        }
        let mut t = Self { cfg: cfg.clone(), model, adam: Adam::new(AdamHyper::with_lr(cfg.learning_rate), &ParamStore::new()), step: 0, dataset, indices };
        t.adam = Adam::new(AdamHyper::with_lr(cfg.learning_rate), t.trained());
        Ok(t)
    }

    pub fn trained(&self) -> &ParamStore<f32> {
        match &self.model.branch {
            Some(b) if self.cfg.target == TrainTarget::Branch => &b.store,
            _ => &self.model.backbone,
        }
    }

    fn trained_mut(&mut self) -> &mut ParamStore<f32> {
        match &mut self.model.branch {
            Some(b) if self.cfg.target == TrainTarget::Branch => &mut b.store,
            _ => &mut self.model.backbone,
        }
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.indices.len().div_ceil(self.cfg.effective_batch()) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let all = self.steps_per_epoch() * self.cfg.epochs as u64;
        self.cfg.max_steps.map_or(all, |m| m.min(all))
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order = self.indices.clone();
        order.shuffle(&mut rng);
        order
    }

    /// Random stream of the item at `pos` within `epoch`.
    fn item_rng(&self, epoch: usize, pos: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((epoch as u64 + 1) << 32) | pos as u64);
        rng
    }

    /// Dataset indices and random streams of the items of `step`.
    pub fn step_items(&self, step: u64) -> Vec<(usize, ChaCha8Rng)> {
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize;
        let e = self.cfg.effective_batch();
        let start = (step % spe) as usize * e;
        let order = self.epoch_order(epoch);
        (start..(start + e).min(order.len())).map(|pos| (order[pos], self.item_rng(epoch, pos))).collect()
    }

    fn conditioning(&self) -> Option<BranchConditioning> {
        match self.cfg.target {
            TrainTarget::Branch => Some(self.cfg.conditioning()),
            TrainTarget::Backbone => None,
        }
    }

    /// Loss of one prepared item; with `acc`, also its gradient.
    pub fn item_loss(&self, item: &TrainItem<f32>, acc: Option<&mut [Tensor<f32>]>) -> Result<Option<f32>> {
        let m = &self.model;
        match (&m.branch, self.cfg.target) {
            (Some(b), TrainTarget::Branch) => {
                branch_item_loss(&m.unet, &m.backbone, &b.net, &b.store, &m.schedule, item, MaskFlags::of(&self.cfg), acc)
            }
            _ => backbone_item_loss(&m.unet, &m.backbone, &m.schedule, item, acc).map(Some),
        }
    }

    pub fn prepare(&self, index: usize, rng: &mut ChaCha8Rng, dropout: f64) -> Result<TrainItem<f32>> {
        prepare_item(&self.model, &self.dataset.get(index)?, self.conditioning(), rng, dropout)
    }

    /// Gradient of `step`: the mean over micro-batches of each micro-batch's
    /// mean item gradient. Micro-batches whose items are all skipped do not
    /// count.
    pub fn step_gradient(&self, step: u64) -> Result<(Vec<Tensor<f32>>, StepMetrics)> {
        let items = self.step_items(step);
        let epoch = (step / self.steps_per_epoch()) as usize;
        let mut acc = self.trained().zeros_like();
        let mut micro = self.trained().zeros_like();
        let (mut loss_sum, mut micro_used, mut used) = (0.0, 0usize, 0usize);
        for chunk in items.chunks(self.cfg.batch_size) {
            micro.iter_mut().for_each(|t| t.data_mut().fill(0.0));
            let (mut l_sum, mut n) = (0.0, 0usize);
            for (index, rng) in chunk {
                let mut rng = rng.clone();
                let item = self.prepare(*index, &mut rng, self.cfg.cond_dropout)?;
                match self.item_loss(&item, Some(&mut micro)) {
                    Ok(Some(l)) => {
                        l_sum += l as f64;
                        n += 1;
                    }
                    Ok(None) => log::warn!("sample {index} has an empty mask and is skipped"),
                    Err(Error::Training(msg)) => return Err(Error::Training(format!("step {step} sample {index}: {msg}"))),
                    Err(e) => return Err(e),
                }
            }
            if n == 0 {
                continue;
            }
            let w = 1.0 / n as f32;
            for (a, m) in acc.iter_mut().zip(&micro) {
                for (x, y) in a.data_mut().iter_mut().zip(m.data()) {
                    *x += w * y;
                }
            }
            loss_sum += l_sum / n as f64;
            micro_used += 1;
            used += n;
        }
        if micro_used > 0 {
            let w = 1.0 / micro_used as f32;
            acc.iter_mut().for_each(|t| t.scale_assign(w));
        }
        let loss = if micro_used > 0 { loss_sum / micro_used as f64 } else { f64::NAN };
        Ok((acc, StepMetrics { step, epoch, loss, items: used }))
    }

    /// Accumulate `grad_accum` micro-batches of `batch_size` items, then
    /// apply one optimizer update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let (grad, m) = self.step_gradient(self.step)?;
        self.step += 1;
        if m.items == 0 {
            log::warn!("step {} had no usable items; no update applied", m.step);
            return Ok(m);
        }
        let hyper = self.adam.hyper;
        let mut adam = std::mem::replace(&mut self.adam, Adam::new(hyper, &ParamStore::new()));
        adam.apply(self.trained_mut(), &grad);
        self.adam = adam;
        Ok(m)
    }

    /// Mean masked loss over `indices` with fixed per-sample draws from
    /// `seed` and no condition dropout.
    pub fn eval_loss(&self, indices: &[usize], seed: u64) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for &i in indices {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let item = self.prepare(i, &mut rng, 0.0)?;
            if let Some(l) = self.item_loss(&item, None)? {
                sum += l as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Training("no evaluable items".into()));
        }
        Ok(sum / n as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            Some(Progress { config: &self.cfg, step: self.step, adam: &self.adam, trained: self.trained() }),
        )
    }

    /// Continue from a checkpoint written by the same run.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let saved = ck.header.train.as_ref().ok_or_else(|| Error::validation("checkpoint", "no training state"))?;
        if !same_run(saved, &self.cfg) {
            return Err(Error::validation("checkpoint", "written by a different training configuration"));
        }
        let model = ck.model()?;
        if model.backbone.checksum() != self.model.backbone.checksum() && self.cfg.target == TrainTarget::Branch {
            return Err(Error::validation("checkpoint", "backbone differs from the one being trained against"));
        }
        self.model = model;
        self.adam = ck.optimizer().ok_or_else(|| Error::validation("checkpoint", "no optimizer state"))?;
        self.step = ck.header.step;
        Ok(())
    }
}

/// Configurations that describe the same sequence of updates, possibly
/// stopping at different steps.
fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let norm = |c: &TrainConfig| TrainConfig {
        epochs: 1,
        max_steps: None,
        checkpoint_every: 1,
        out_dir: Default::default(),
        dataset: Default::default(),
        backbone: None,
        ..c.clone()
    };
    norm(a) == norm(b)
}

fn read_metrics(path: &Path, upto: u64) -> Result<Vec<MetricRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: MetricRecord = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        if r.step < upto {
            out.push(r);
        }
    }
    Ok(out)
}

fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_metric(path: &Path, r: &MetricRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))
}

/// Run (or resume) training in `cfg.out_dir`. Writes `checkpoint.bin`
/// every `checkpoint_every` steps and at the end, and appends one metrics
/// record per step plus one per completed epoch.
pub fn train_model(cfg: &TrainConfig, model: Model, dataset: &Dataset) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    let mut trainer = Trainer::new(cfg, model, dataset)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck_path = dir.join("checkpoint.bin");
    let metrics_path = dir.join("metrics.jsonl");
    if ck_path.exists() {
        trainer.resume(&Checkpoint::load(&ck_path)?)?;
        log::info!("resuming from step {}", trainer.step);
    }
    let mut records = read_metrics(&metrics_path, trainer.step)?;
    write_metrics(&metrics_path, &records)?;
    let total = trainer.total_steps();
    let spe = trainer.steps_per_epoch();
    while trainer.step < total {
        let m = trainer.train_step()?;
        if m.items == 0 {
            continue;
        }
        let rec = MetricRecord {
            kind: "step".into(),
            step: m.step,
            epoch: m.epoch,
            loss: m.loss,
            lr: cfg.learning_rate,
            items: m.items,
            timestamp: now(),
        };
        log::info!("step {} epoch {} loss {:.5}", m.step, m.epoch, m.loss);
        append_metric(&metrics_path, &rec)?;
        records.push(rec);
        if trainer.step % spe == 0 {
            let steps: Vec<&MetricRecord> =
                records.iter().filter(|r| r.kind == "step" && r.epoch == m.epoch && r.loss.is_finite()).collect();
            let rec = MetricRecord {
                kind: "epoch".into(),
                step: m.step,
                epoch: m.epoch,
                loss: steps.iter().map(|r| r.loss).sum::<f64>() / steps.len().max(1) as f64,
                lr: cfg.learning_rate,
                items: steps.iter().map(|r| r.items).sum(),
                timestamp: now(),
            };
            append_metric(&metrics_path, &rec)?;
            records.push(rec);
        }
        if trainer.step % cfg.checkpoint_every == 0 || trainer.step == total {
            trainer.checkpoint().save(&ck_path)?;
        }
    }
    let ck = trainer.checkpoint();
    if !ck_path.exists() {
        ck.save(&ck_path)?;
    }
    Ok((ck, records))
}

/// File-driven training: load the dataset and the backbone checkpoint named
/// in `cfg` (or build a fresh backbone) and run [`train_model`].
pub fn train(cfg: &TrainConfig) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let model = match &cfg.backbone {
        Some(p) => {
            let mut m = Checkpoint::load(p)?.model()?;
            m.branch = None;
            m
        }
        None => Model::new(&UNetConfig::default(), cfg.seed),
    };
    train_model(cfg, model, &dataset)
}
