//! Mini-batch training loop: seeded shuffling, online augmentation, SGD
//! with momentum and a per-epoch learning-rate decay.
//!
//! Everything random is derived from `(seed, epoch)` or `(seed, step)`, so
//! a run restored from a checkpoint continues exactly like one that never
//! stopped.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, LossBreakdown, LossConfig};
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::{lr_at_epoch, sgd_step, OptimizerState};
use crate::synth::{augment, derive_seed, rng_from, AugmentationConfig, Image, Sample};
use crate::tensor::Tensor;

const TAG_MODEL: u64 = 0x30de1;
const TAG_SHUFFLE: u64 = 0x5f1e;
const TAG_AUGMENT: u64 = 0xa06e;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Rescale the gradient to this global L2 norm when it is larger.
    pub clip_grad_norm: Option<f32>,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: u32,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 4,
            lr: 5e-3,
            lr_decay: 0.9,
            momentum: 0.9,
            weight_decay: 0.01,
            seed: 0,
            max_steps: None,
            clip_grad_norm: None,
            checkpoint_every: 1,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig("lr must be positive and lr_decay in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip_grad_norm must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        let [h, w] = self.model.input_size;
        self.model.check_size(h, w)?;
        let min = self.loss.min_image_size();
        if h < min || w < min {
            return Err(Error::ImageTooSmall { height: h, width: w, min });
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: u32) -> f32 {
        lr_at_epoch(self.lr, self.lr_decay, epoch)
    }
}

/// Network inputs and targets for one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Oldest first, each `N x 3 x H x W`.
    pub frames: Vec<Tensor<f32>>,
    pub wire: Tensor<f32>,
    pub depth: Tensor<f32>,
}

impl Batch {
    /// Uses the newest `arity` frames of every sample.
    pub fn from_samples(samples: &[&Sample], arity: usize) -> Result<Batch> {
        let first = samples.first().ok_or(Error::InvalidConfig("empty batch".into()))?;
        for s in samples {
            if s.frames.len() < arity {
                return Err(Error::ArityMismatch {
                    expected: arity,
                    got: s.frames.len(),
                });
            }
            if !s.wire_mask.same_dims(&first.wire_mask) {
                return Err(Error::ShapeMismatch {
                    op: "Batch::from_samples",
                    lhs: alloc::vec![first.height(), first.width()],
                    rhs: alloc::vec![s.height(), s.width()],
                });
            }
        }
        let frames = (0..arity)
            .map(|j| {
                let imgs: Vec<&Image> = samples.iter().map(|s| &s.frames[s.frames.len() - arity + j]).collect();
                Image::batch(&imgs)
            })
            .collect::<Result<_>>()?;
        let masks: Vec<&Image> = samples.iter().map(|s| &s.wire_mask).collect();
        let depths: Vec<&Image> = samples.iter().map(|s| &s.depth).collect();
        Ok(Batch {
            frames,
            wire: Image::batch(&masks)?,
            depth: Image::batch(&depths)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u32,
    pub lr: f32,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model<f32>,
    opt: OptimizerState<f32>,
    epoch: u32,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build_model(&cfg.model, derive_seed(cfg.seed, &[TAG_MODEL]))?;
        let opt = OptimizerState::new(model.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            cfg,
            model,
            opt,
            epoch: 0,
            step: 0,
        })
    }

    /// Restores parameters, velocities and position from `ckpt`.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        ckpt.restore(t.model.params_mut(), Some(&mut t.opt))?;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.model.params(), &self.opt, self.epoch, self.step)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f32 {
        self.opt.lr
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Forward, backward and one SGD update on a prepared batch.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &batch.frames)?;
        let (loss, breakdown) = total_loss(&mut g, &out, &batch.wire, &batch.depth, &self.cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!(
                "loss diverged at step {}",
                self.step
            )));
        }
        g.backward(loss)?;
        self.model.params_mut().absorb_grads(&g);
        if let Some(max) = self.cfg.clip_grad_norm {
            self.model.params_mut().clip_grad_norm(max);
        }
        sgd_step(self.model.params_mut(), &mut self.opt)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Sample order for `epoch`.
    pub fn epoch_order(&self, epoch: u32, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from(derive_seed(self.cfg.seed, &[TAG_SHUFFLE, epoch as u64])));
        idx
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    /// Trains one epoch over `data`, resuming mid-epoch if the step counter
    /// says part of it already ran. Returns `false` if `max_steps` cut it short.
    pub fn run_epoch(&mut self, data: &[Sample], mut on_step: impl FnMut(&StepLog)) -> Result<bool> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("no training samples".into()));
        }
        let per_epoch = self.steps_per_epoch(data.len());
        let order = self.epoch_order(self.epoch, data.len());
        let done = self.step.saturating_sub(per_epoch * self.epoch as u64);
        let arity = self.cfg.model.variant.arity();
        for chunk in order.chunks(self.cfg.batch_size).skip(done as usize) {
            if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                return Ok(false);
            }
            let augmented: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let seed = derive_seed(self.cfg.seed, &[TAG_AUGMENT, self.step, k as u64]);
                    augment(&data[i], &self.cfg.augmentation, seed)
                })
                .collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let batch = Batch::from_samples(&refs, arity)?;
            let epoch = self.epoch;
            let lr = self.opt.lr;
            let loss = self.train_batch(&batch)?;
            on_step(&StepLog {
                step: self.step,
                epoch,
                lr,
                loss,
            });
        }
        self.epoch += 1;
        self.opt.lr *= self.cfg.lr_decay;
        Ok(true)
    }

    /// Runs epochs until the configured budget is spent. `on_epoch` sees
    /// the trainer after each completed epoch.
    pub fn fit(
        &mut self,
        data: &[Sample],
        mut on_step: impl FnMut(&StepLog),
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            if !self.run_epoch(data, &mut on_step)? {
                break;
            }
            on_epoch(self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::synth::{generate_sample, SceneConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            model: ModelConfig::tiny(Variant::UcorrDeep, 48),
            augmentation: AugmentationConfig::default(),
            ..TrainConfig::default()
        }
    }

    fn data(n: usize) -> Vec<Sample> {
        let sc = SceneConfig {
            height: 48,
            width: 48,
            ..SceneConfig::default()
        };
        (0..n).map(|i| generate_sample(&sc, i as u64).unwrap()).collect()
    }

    #[test]
    fn lr_follows_schedule() {
        let d = data(3);
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let mut lrs = Vec::new();
        t.fit(&d, |s| lrs.push((s.epoch, s.lr)), |_| Ok(())).unwrap();
        assert_eq!(lrs.len(), 4);
        assert_eq!(lrs[0], (0, 5e-3));
        assert_eq!(lrs[2], (1, 5e-3f32 * 0.9));
        assert_eq!(t.lr(), lr_at_epoch(5e-3, 0.9, 2));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let d = data(3);
        let mut full = Trainer::new(tiny_cfg()).unwrap();
        full.fit(&d, |_| {}, |_| Ok(())).unwrap();

        let mut cfg = tiny_cfg();
        cfg.max_steps = Some(3);
        let mut part = Trainer::new(cfg).unwrap();
        part.fit(&d, |_| {}, |_| Ok(())).unwrap();
        assert_eq!(part.step(), 3);
        let ckpt = Checkpoint::decode(&part.checkpoint().encode()).unwrap();
        let mut resumed = Trainer::resume(tiny_cfg(), &ckpt).unwrap();
        resumed.fit(&d, |_| {}, |_| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint(), full.checkpoint());
    }

    #[test]
    fn rejects_tiny_images() {
        let mut cfg = tiny_cfg();
        cfg.model.input_size = [16, 16];
        assert!(matches!(Trainer::new(cfg), Err(Error::ImageTooSmall { .. })));
    }
}
