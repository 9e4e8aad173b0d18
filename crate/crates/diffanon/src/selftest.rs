//! Oracle checks with their pinned tolerances, shared by `diffanon selftest`
//! and the acceptance test target.

use std::time::Instant;

use diffanon_core::eval::leakage_probe;
use diffanon_core::guidance::{anonymize, GuidanceSpec, PseudoSpeakerPool};
use diffanon_core::oracle::{self, ScalarGaussian};
use diffanon_core::seed::{labeled_rng, randn};
use diffanon_core::training::sample_drop_pattern;
use diffanon_core::{BackboneConfig, DenoiserModel, ScheduleConfig, World, WorldConfig};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult { name, passed, detail }
    }

    fn error(name: &'static str, e: impl std::fmt::Display) -> Self {
        CheckResult::new(name, false, format!("error: {e}"))
    }
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SECONDS: f64 = 60.0;
pub const FORWARD_DRAWS: usize = 100_000;
pub const FORWARD_SE: f64 = 3.0;
pub const DROP_DRAWS: usize = 100_000;
pub const DROP_PP: f64 = 1.0;
pub const DDIM_TOL: f64 = 1e-8;
pub const LINEAR_STEPS: usize = 2000;
pub const LINEAR_REL: f64 = 0.10;
pub const LEAKAGE_MARGIN_PP: f64 = 10.0;
pub const LEAKAGE_CHANCE_PP: f64 = 3.0;

/// Full toy backbone for the gradient check: 3 blocks, 16 channels, 12 frames.
pub fn gradient_check() -> CheckResult {
    let name = "gradient check";
    let cfg = BackboneConfig { n_blocks: 3, channels: 16, embed_dim: 16, ..BackboneConfig::toy() };
    let start = Instant::now();
    match oracle::backbone_gradient_check(cfg, 12, 0) {
        Ok(g) => {
            let secs = start.elapsed().as_secs_f64();
            CheckResult::new(
                name,
                g.max_rel_err <= GRAD_TOL && secs < GRAD_SECONDS,
                format!("max rel err {:.2e} over {} params (tol {GRAD_TOL:e}), {secs:.1}s (limit {GRAD_SECONDS}s)", g.max_rel_err, g.n_params),
            )
        }
        Err(e) => CheckResult::error(name, e),
    }
}

pub fn forward_statistics() -> CheckResult {
    let name = "forward-process statistics";
    let run = || -> diffanon_core::Result<(bool, String)> {
        let s = ScheduleConfig::toy().build()?;
        let mut worst: f64 = 0.0;
        for t in [1, s.steps() / 2, s.steps()] {
            let m = oracle::forward_moments(&s, t, 1.5, FORWARD_DRAWS, &mut labeled_rng(0, "forward-stats", t as u64))?;
            worst = worst.max(m.z_max());
        }
        Ok((worst <= FORWARD_SE, format!("worst deviation {worst:.2} SE over t in {{1, T/2, T}} (limit {FORWARD_SE})")))
    };
    run().map_or_else(|e| CheckResult::error(name, e), |(ok, d)| CheckResult::new(name, ok, d))
}

/// A backbone with random weights everywhere, so every condition reaches the output.
fn random_model(world: &World, seed: u64) -> diffanon_core::Result<DenoiserModel> {
    let cfg = BackboneConfig {
        n_blocks: 2,
        kernel: 3,
        channels: world.config.embed_dim,
        embed_dim: world.config.embed_dim,
        cond_pro_dim: world.config.cond_pro_dim,
        cond_spk_dim: world.config.cond_spk_dim,
        ..BackboneConfig::toy()
    };
    let init = DenoiserModel::new(cfg, &mut labeled_rng(seed, "init", 0))?;
    let mut r = labeled_rng(seed, "random-weights", 0);
    let params = init.params().iter().map(|p| randn(p.shape(), &mut r).map(|v| 0.2 * v)).collect();
    DenoiserModel::from_params(cfg, params)
}

/// End-to-end guided sampling against the corresponding plain runs, bitwise.
pub fn cfg_identities() -> CheckResult {
    let name = "CFG identities";
    let run = || -> diffanon_core::Result<(bool, String)> {
        let world = World::generate(WorldConfig { frames: 16, ..WorldConfig::default() })?;
        let model = random_model(&world, 3)?;
        let sched = ScheduleConfig::toy().build()?;
        let pool = PseudoSpeakerPool::from_world(&world, 3, &mut labeled_rng(0, "pool", 0))?;
        let psi = pool.entries()[0].1.clone();
        let source = world.generate_utterance(world.eval_speakers().start, &mut labeled_rng(0, "source", 0))?;
        let out = |spec: &GuidanceSpec| anonymize(&model, &sched, spec, &source, &mut labeled_rng(0, "sampler", 0));
        let n = 10;
        let cases = [
            ("w_pro=1 vs plain with prosody", GuidanceSpec::prosody_cfg(1.0, psi.clone(), n), GuidanceSpec::plain(true, Some(psi.clone()), n)),
            ("w_pro=0 vs plain without prosody", GuidanceSpec::prosody_cfg(0.0, psi.clone(), n), GuidanceSpec::plain(false, Some(psi.clone()), n)),
            ("w_spk=0 vs plain with psi", GuidanceSpec::speaker_cfg(0.0, psi.clone(), n), GuidanceSpec::plain(false, Some(psi.clone()), n)),
        ];
        let mut failed = Vec::new();
        for (label, guided, plain) in &cases {
            if !out(guided)?.bitwise_eq(&out(plain)?) {
                failed.push(*label);
            }
        }
        // Guard against a model whose output ignores the conditions.
        let differs = !out(&cases[0].1)?.bitwise_eq(&out(&cases[1].1)?);
        let detail = if failed.is_empty() {
            format!("3 identities exact at f64; prosody changes the output: {differs}")
        } else {
            format!("mismatch: {}", failed.join(", "))
        };
        Ok((failed.is_empty() && differs, detail))
    };
    run().map_or_else(|e| CheckResult::error(name, e), |(ok, d)| CheckResult::new(name, ok, d))
}

pub fn drop_law() -> CheckResult {
    let f = oracle::drop_frequencies(DROP_DRAWS, &mut labeled_rng(0, "drop-law", 0), sample_drop_pattern);
    let pp = f.map(|v| 100.0 * v);
    let within = (pp[0] - 50.0).abs() <= DROP_PP && (pp[1] - 30.0).abs() <= DROP_PP && (pp[2] - 20.0).abs() <= DROP_PP;
    CheckResult::new(
        "drop-schedule law",
        within && f[3] == 0.0,
        format!(
            "all {:.2}%, drop-pro {:.2}%, drop-pro+spk {:.2}% (±{DROP_PP} pp of 50/30/20), speaker-only {} draws",
            pp[0],
            pp[1],
            pp[2],
            (f[3] * DROP_DRAWS as f64).round()
        ),
    )
}

pub fn ddim_oracle() -> CheckResult {
    let name = "DDIM oracle";
    let run = || -> diffanon_core::Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        for (steps, n) in [(200, 50), (200, 200), (1000, 100), (1000, 7)] {
            let s = ScheduleConfig::scaled(steps).build()?;
            let x0 = randn(&[32, 64], &mut labeled_rng(0, "ddim-x0", steps as u64));
            worst = worst.max(oracle::ddim_oracle_error(&s, &x0, n, &mut labeled_rng(0, "ddim-noise", n as u64))?);
        }
        Ok((worst <= DDIM_TOL, format!("max abs error {worst:.2e} (tol {DDIM_TOL:e})")))
    };
    run().map_or_else(|e| CheckResult::error(name, e), |(ok, d)| CheckResult::new(name, ok, d))
}

pub fn linear_gaussian() -> CheckResult {
    let name = "linear-Gaussian posterior";
    let run = || -> diffanon_core::Result<(bool, String)> {
        let s = ScheduleConfig::toy().build()?;
        let source = ScalarGaussian { var_x: 2.0 };
        let optimum = source.mean_over_t(&s, |t| source.mmse(&s, t));
        let fit = oracle::linear_gaussian_fit(source, &s, LINEAR_STEPS, 64, 0.05, 0)?;
        debug_assert_eq!(fit.optimum, optimum);
        let rel = fit.loss / optimum - 1.0;
        Ok((rel <= LINEAR_REL, format!("loss {:.5} vs closed-form MMSE {optimum:.5} (+{:.2}%, limit {:.0}%)", fit.loss, 100.0 * rel, 100.0 * LINEAR_REL)))
    };
    run().map_or_else(|e| CheckResult::error(name, e), |(ok, d)| CheckResult::new(name, ok, d))
}

pub fn leakage_premise() -> CheckResult {
    let name = "leakage premise";
    let run = || -> diffanon_core::Result<(bool, String)> {
        let leaky = World::generate(WorldConfig { leakage: 0.5, ..WorldConfig::default() })?;
        let clean = World::generate(WorldConfig { leakage: 0.0, ..WorldConfig::default() })?;
        let chance = 100.0 / leaky.config.n_speakers as f64;
        let a = 100.0 * leakage_probe(&leaky, 50, 100, 0)?;
        let b = 100.0 * leakage_probe(&clean, 50, 100, 0)?;
        let ok = a >= chance + LEAKAGE_MARGIN_PP && (b - chance).abs() <= LEAKAGE_CHANCE_PP;
        Ok((ok, format!("accuracy {a:.2}% at leakage 0.5, {b:.2}% at leakage 0 (chance {chance:.2}%)")))
    };
    run().map_or_else(|e| CheckResult::error(name, e), |(ok, d)| CheckResult::new(name, ok, d))
}

/// Every check that needs no trained model.
pub fn run_all() -> Vec<CheckResult> {
    vec![gradient_check(), forward_statistics(), cfg_identities(), drop_law(), ddim_oracle(), linear_gaussian(), leakage_premise()]
}
