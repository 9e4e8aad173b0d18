//! Closed-form and brute-force checks of the diffusion stack.
//!
//! Each check returns the measured quantity next to the value it is judged
//! against, leaving the verdict to the caller.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::adam::AdamState;
use crate::autodiff::Tape;
use crate::backbone::{BackboneConfig, ConditionBundle, DenoiserModel};
use crate::error::Result;
use crate::schedule::{ddim_step, ddim_timestep_grid, forward_noise, NoiseSchedule};
use crate::seed::{labeled_rng, randn, Rng};
use crate::tensor::Tensor;
use crate::training::DropPattern;

/// Relative error with an absolute floor so vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / f64::max(f64::max(libm::fabs(a), libm::fabs(b)), 1e-6)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub n_params: usize,
}

/// Compares tape gradients of an x-prediction MSE with central differences
/// for every parameter of a randomly initialised backbone.
///
/// All parameters, including biases and the zero-initialised output
/// projection, are drawn at random so no gradient vanishes structurally.
pub fn backbone_gradient_check(config: BackboneConfig, frames: usize, seed: u64) -> Result<GradCheck> {
    let init = DenoiserModel::new(config, &mut labeled_rng(seed, "gradcheck-init", 0))?;
    let mut r = labeled_rng(seed, "gradcheck-params", 0);
    let params = init.params().iter().map(|p| randn(p.shape(), &mut r).map(|v| 0.3 * v)).collect();
    let mut model = DenoiserModel::from_params(config, params)?;

    let mut d = labeled_rng(seed, "gradcheck-data", 0);
    let x_t = randn(&[config.embed_dim, frames], &mut d);
    let x0 = randn(&[config.embed_dim, frames], &mut d);
    let conds = ConditionBundle::new(
        randn(&[config.embed_dim, frames], &mut d),
        Some(randn(&[config.cond_pro_dim, frames], &mut d)),
        Some(randn(&[config.cond_spk_dim, frames], &mut d)),
    );
    let t = 7;

    let loss = |m: &DenoiserModel| -> Result<f64> {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let pred = m.record(&mut tape, &p, &x_t, t, &conds)?;
        let target = tape.constant(x0.clone());
        let l = tape.mse(pred, target)?;
        Ok(tape.value(l).data()[0])
    };

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let pred = model.record(&mut tape, &p, &x_t, t, &conds)?;
        let target = tape.constant(x0.clone());
        let l = tape.mse(pred, target)?;
        let mut g = tape.backward(l)?;
        p.iter().zip(model.params()).map(|(&v, t)| g.take_or_zeros(v, t.shape())).collect()
    };

    // Four-point central stencil: truncation error O(h^4).
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut n_params = 0;
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = model.params()[i].data()[j];
            let mut at = |delta: f64| -> Result<f64> {
                model.params_mut()[i].data_mut()[j] = orig + delta;
                loss(&model)
            };
            let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            model.params_mut()[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(g.data()[j], fd));
            n_params += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, n_params })
}

/// Empirical moments of scalar forward draws next to their predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardMoments {
    pub t: usize,
    pub mean: f64,
    pub var: f64,
    pub expected_mean: f64,
    pub expected_var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

impl ForwardMoments {
    /// Largest deviation from prediction, in standard errors.
    pub fn z_max(&self) -> f64 {
        f64::max(libm::fabs(self.mean - self.expected_mean) / self.se_mean, libm::fabs(self.var - self.expected_var) / self.se_var)
    }
}

/// Draws `n` scalar `x_t` for a fixed `x0` and compares mean and variance with
/// `sqrt(abar) x0` and `1 - abar`.
pub fn forward_moments(sched: &NoiseSchedule, t: usize, x0: f64, n: usize, rng: &mut Rng) -> Result<ForwardMoments> {
    let clean = Tensor::filled(&[n], x0);
    let x_t = forward_noise(&clean, t, randn(&[n], rng), sched)?.x_t;
    let mean = x_t.mean();
    let var = x_t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let ab = sched.alpha_bar(t);
    let expected_var = 1.0 - ab;
    Ok(ForwardMoments {
        t,
        mean,
        var,
        expected_mean: libm::sqrt(ab) * x0,
        expected_var,
        se_mean: libm::sqrt(expected_var / n as f64),
        se_var: expected_var * libm::sqrt(2.0 / (n - 1) as f64),
    })
}

/// Max abs error of the full DDIM reverse pass driven by the exact `x0`.
pub fn ddim_oracle_error(sched: &NoiseSchedule, x0: &Tensor, n_infer: usize, rng: &mut Rng) -> Result<f64> {
    let steps = sched.steps();
    let mut x = forward_noise(x0, steps, randn(x0.shape(), rng), sched)?.x_t;
    for (t, t_prev) in ddim_timestep_grid(steps, n_infer)? {
        x = ddim_step(&x, t, t_prev, x0, sched)?;
    }
    Ok(x.max_abs_diff(x0))
}

/// Empirical frequencies of `(All, DropPro, DropProSpk, speaker-only drop)` over `n` draws.
pub fn drop_frequencies(n: usize, rng: &mut Rng, sample: impl Fn(&mut Rng) -> DropPattern) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let p = sample(rng);
        let k = match (p.keeps_prosody(), p.keeps_speaker()) {
            (true, true) => 0,
            (false, true) => 1,
            (false, false) => 2,
            (true, false) => 3,
        };
        counts[k] += 1;
    }
    counts.map(|c| c as f64 / n as f64)
}

/// Scalar source `x0 ~ N(0, var_x)` noised by the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarGaussian {
    pub var_x: f64,
}

impl ScalarGaussian {
    /// Posterior variance of `x0` given `x_t`: the per-step MMSE.
    pub fn mmse(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        let ab = sched.alpha_bar(t);
        self.var_x * (1.0 - ab) / (ab * self.var_x + 1.0 - ab)
    }

    /// Expected x-prediction loss of `x0_hat = a x_t`.
    pub fn linear_loss(&self, sched: &NoiseSchedule, t: usize, a: f64) -> f64 {
        let ab = sched.alpha_bar(t);
        a * a * (ab * self.var_x + 1.0 - ab) - 2.0 * a * libm::sqrt(ab) * self.var_x + self.var_x
    }

    /// Both quantities averaged over `t` uniform on `1..=T`.
    pub fn mean_over_t(&self, sched: &NoiseSchedule, f: impl Fn(usize) -> f64) -> f64 {
        (1..=sched.steps()).map(f).sum::<f64>() / sched.steps() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    /// Learned gain per timestep, index `t - 1`.
    pub gains: Vec<f64>,
    /// Expected loss of the learned denoiser averaged over uniform `t`.
    pub loss: f64,
    /// Closed-form MMSE averaged over uniform `t`.
    pub optimum: f64,
}

/// Trains a linear denoiser `x0_hat = a_t x_t` (one gain per timestep) on
/// the scalar world with Adam and the same uniform-`t` x-prediction loss as
/// the backbone, then scores it against the closed-form optimum.
pub fn linear_gaussian_fit(
    source: ScalarGaussian,
    sched: &NoiseSchedule,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearFit> {
    let big_t = sched.steps();
    let mut params = alloc::vec![Tensor::zeros(&[big_t])];
    let mut opt = AdamState::new(&params, lr);
    let sd = libm::sqrt(source.var_x);
    for step in 0..steps {
        let mut r = labeled_rng(seed, "linear-oracle", step as u64);
        let mut grad = Tensor::zeros(&[big_t]);
        for _ in 0..batch {
            let t = r.random_range(1..=big_t);
            let x0 = sd * crate::seed::normal(&mut r);
            let ab = sched.alpha_bar(t);
            let x_t = libm::sqrt(ab) * x0 + libm::sqrt(1.0 - ab) * crate::seed::normal(&mut r);
            let a = params[0].data()[t - 1];
            grad.data_mut()[t - 1] += 2.0 * (a * x_t - x0) * x_t / batch as f64;
        }
        opt.step(&mut params, core::slice::from_ref(&grad))?;
    }
    let gains = params.remove(0).into_data();
    Ok(LinearFit {
        loss: source.mean_over_t(sched, |t| source.linear_loss(sched, t, gains[t - 1])),
        optimum: source.mean_over_t(sched, |t| source.mmse(sched, t)),
        gains,
    })
}
