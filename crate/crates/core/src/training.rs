//! Condition-dropping training loop.
//!
//! Every batch item draws its own drop pattern: all conditions (50%), prosody
//! dropped (30%), or prosody and speaker dropped (20%). Dropping the speaker
//! while keeping prosody never happens.
//!
//! Step `k` draws all of its randomness from a generator seeded by
//! `(seed, k)`, so a run can be resumed from its step counter alone. At every
//! checkpoint boundary the parameters and optimizer moments are rounded to
//! f32, the checkpoint precision, which makes a resumed run continue
//! bitwise-identically to an uninterrupted one.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::adam::AdamState;
use crate::autodiff::Tape;
use crate::backbone::{ConditionBundle, DenoiserModel};
use crate::error::{Error, Result};
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::seed::{labeled_rng, randn, Rng};
use crate::tensor::Tensor;
use crate::world::{ToyUtterance, World};

const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DropPattern {
    All,
    DropPro,
    DropProSpk,
}

impl DropPattern {
    pub fn keeps_prosody(self) -> bool {
        self == DropPattern::All
    }

    pub fn keeps_speaker(self) -> bool {
        self != DropPattern::DropProSpk
    }

    /// Condition bundle for `utt` with this pattern's conditions nulled.
    pub fn apply(self, utt: &ToyUtterance) -> ConditionBundle {
        ConditionBundle::new(
            utt.c_sem.clone(),
            self.keeps_prosody().then(|| utt.c_pro.clone()),
            self.keeps_speaker().then(|| utt.c_spk.clone()),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DropSchedule {
    pub p_all: f64,
    pub p_drop_pro: f64,
    pub p_drop_pro_spk: f64,
}

impl Default for DropSchedule {
    fn default() -> Self {
        DropSchedule { p_all: 0.5, p_drop_pro: 0.3, p_drop_pro_spk: 0.2 }
    }
}

impl DropSchedule {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_all, self.p_drop_pro, self.p_drop_pro_spk];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || libm::fabs(ps.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(Error::Config(format!("drop probabilities {ps:?} must lie in [0, 1] and sum to 1")));
        }
        Ok(())
    }

    /// One categorical draw.
    pub fn sample(&self, rng: &mut Rng) -> DropPattern {
        let u: f64 = rng.random();
        if u < self.p_all {
            DropPattern::All
        } else if u < self.p_all + self.p_drop_pro {
            DropPattern::DropPro
        } else {
            DropPattern::DropProSpk
        }
    }
}

pub fn sample_drop_pattern(rng: &mut Rng) -> DropPattern {
    DropSchedule::default().sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub drop: DropSchedule,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig { steps: 3000, batch: 8, lr: 2e-3, seed: 0, drop: DropSchedule::default(), checkpoint_every: 500 }
    }

    /// 400k steps at learning rate 1e-4, batch 8.
    pub fn full_scale() -> Self {
        TrainConfig { steps: 400_000, batch: 8, lr: 1e-4, seed: 0, drop: DropSchedule::default(), checkpoint_every: 10_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.drop.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

/// Accumulated gradient of the batch-mean loss, one tensor per parameter.
fn batch_gradients(model: &DenoiserModel, items: &[(Tensor, usize, Tensor, ConditionBundle)]) -> Result<(f64, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    for (x_t, t, x0, conds) in items {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let pred = model.record(&mut tape, &p, x_t, *t, conds)?;
        let target = tape.constant(x0.clone());
        let loss = tape.mse(pred, target)?;
        total += tape.value(loss).data()[0];
        let mut g = tape.backward(loss)?;
        for ((acc, v), param) in grads.iter_mut().zip(&p).zip(model.params()) {
            let gi = g.take_or_zeros(*v, param.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += scale * b;
            }
        }
    }
    Ok((total * scale, grads))
}

/// One optimizer step on `batch`: per item a uniform timestep, fresh noise and
/// a drop pattern, then Adam on the batch-mean x-prediction loss.
pub fn train_step(
    model: &mut DenoiserModel,
    batch: &[ToyUtterance],
    rng: &mut Rng,
    sched: &NoiseSchedule,
    opt: &mut AdamState,
    drop: &DropSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut items = Vec::with_capacity(batch.len());
    for utt in batch {
        let t = rng.random_range(1..=sched.steps());
        let eps = randn(utt.x0.shape(), rng);
        let sample = forward_noise(&utt.x0, t, eps, sched)?;
        let conds = drop.sample(rng).apply(utt);
        items.push((sample.x_t, t, sample.x0, conds));
    }
    let (loss, grads) = batch_gradients(model, &items)?;
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { step: opt.step, loss });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(loss)
}

fn round_f32(ts: &mut [Tensor]) {
    for t in ts {
        for x in t.data_mut() {
            *x = *x as f32 as f64;
        }
    }
}

/// Model, optimizer and step counter of a (possibly resumed) training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DenoiserModel,
    pub opt: AdamState,
    pub step: u64,
    pub log: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: DenoiserModel) -> Result<Self> {
        config.validate()?;
        let opt = AdamState::new(model.params(), config.lr);
        Ok(Trainer { config, model, opt, step: 0, log: Vec::new() })
    }

    /// Continues from restored state; the log starts empty.
    pub fn resume(config: TrainConfig, model: DenoiserModel, opt: AdamState, step: u64) -> Result<Self> {
        config.validate()?;
        if opt.first.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match model".into()));
        }
        Ok(Trainer { config, model, opt, step, log: Vec::new() })
    }

    /// Generator for step `step`, independent of everything before it.
    pub fn step_rng(&self, step: u64) -> Rng {
        labeled_rng(self.config.seed, "train", step)
    }

    /// Rounds parameters and moments to f32, the checkpoint precision.
    pub fn round_to_checkpoint_precision(&mut self) {
        round_f32(self.model.params_mut());
        round_f32(&mut self.opt.first);
        round_f32(&mut self.opt.second);
    }

    /// Runs one step on a fresh batch of pool-speaker utterances.
    pub fn advance(&mut self, world: &World, sched: &NoiseSchedule) -> Result<f64> {
        let mut rng = self.step_rng(self.step);
        let pool = world.pool_speakers();
        let batch = (0..self.config.batch)
            .map(|_| {
                let spk = rng.random_range(pool.clone());
                world.generate_utterance(spk, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = train_step(&mut self.model, &batch, &mut rng, sched, &mut self.opt, &self.config.drop)
            .map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { step: self.step, loss },
                other => other,
            })?;
        self.step += 1;
        self.log.push(LossRecord { step: self.step, loss });
        if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
            self.round_to_checkpoint_precision();
        }
        Ok(loss)
    }

    /// Trains until `config.steps`, calling `on_checkpoint` at every checkpoint boundary.
    pub fn run(&mut self, world: &World, sched: &NoiseSchedule, mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            self.advance(world, sched)?;
            if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Trains `model` for `cfg.steps` without checkpoint output.
pub fn train_loop(cfg: TrainConfig, world: &World, sched: &NoiseSchedule, model: DenoiserModel) -> Result<(DenoiserModel, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(cfg, model)?;
    trainer.run(world, sched, |_| Ok(()))?;
    Ok((trainer.model, trainer.log))
}
