//! Forward noising process, x-prediction loss and the deterministic DDIM step.
//!
//! Timesteps are 1-based: `t` ranges over `1..=steps()`, and `alpha_bar(0)`
//! is defined as 1 so the last reverse step lands on the clean estimate.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{ConditionBundle, X0Predictor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of a linear beta schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ScheduleConfig {
    /// The conventional 1000-step linear schedule, 1e-4 to 0.02.
    pub fn full_scale() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }

    /// Linear schedule over `steps` with endpoints scaled by `1000 / steps`,
    /// so the terminal signal level matches the 1000-step schedule.
    pub fn scaled(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        ScheduleConfig { steps, beta_start: 1e-4 * k, beta_end: 0.02 * k }
    }

    pub fn toy() -> Self {
        Self::scaled(200)
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
        }
        let span = (steps - 1) as f64;
        Self::from_betas((0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / span).collect())
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Schedule("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, lo, hi: self.steps() });
        }
        Ok(())
    }
}

/// A noised sample together with the noise and clean target that built it.
#[derive(Clone, Debug)]
pub struct ForwardSample {
    pub x_t: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub x0: Tensor,
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with caller-supplied `eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: Tensor, sched: &NoiseSchedule) -> Result<ForwardSample> {
    sched.check(t, 1)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let x_t = x0.zip_map(&eps, |x, e| a * x + b * e)?;
    Ok(ForwardSample { x_t, eps, t, x0: x0.clone() })
}

/// Mean-square x-prediction error of `model` on one forward sample.
pub fn x0_training_loss<M: X0Predictor + ?Sized>(model: &M, sample: &ForwardSample, conds: &ConditionBundle) -> Result<f64> {
    let pred = model.predict_x0(&sample.x_t, sample.t, conds)?;
    let diff = pred.zip_map(&sample.x0, |p, x| (x - p) * (x - p))?;
    Ok(diff.mean())
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev` given an x0 estimate.
pub fn ddim_step(x_t: &Tensor, t: usize, t_prev: usize, x0_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t, 1)?;
    if t_prev >= t {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let (pa, pb) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
    x_t.zip_map(x0_hat, |x, x0| {
        let eps = (x - sa * x0) / sb;
        pa * x0 + pb * eps
    })
}

/// The noise estimate implied by `x0_hat` at step `t`.
pub fn implied_noise(x_t: &Tensor, t: usize, x0_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t, 1)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    x_t.zip_map(x0_hat, |x, x0| (x - sa * x0) / sb)
}

/// Evenly spaced descending `(t, t_prev)` pairs from `steps` down to 0.
pub fn ddim_timestep_grid(steps: usize, n_infer: usize) -> Result<Vec<(usize, usize)>> {
    if n_infer == 0 || n_infer > steps {
        return Err(Error::Config(format!("inference steps must lie in [1, {steps}], got {n_infer}")));
    }
    let at = |i: usize| i * steps / n_infer;
    Ok((1..=n_infer).rev().map(|i| (at(i), at(i - 1))).collect())
}
