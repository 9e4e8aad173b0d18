//! Classifier-free guidance and the anonymization sampler.
//!
//! Two guidance combinators act on x0 estimates at every DDIM step:
//!
//! ```text
//! prosody:  x0 = u + w_pro (c - u),        u = f(c_sem, 0, psi),  c = f(c_sem, c_pro, psi)
//! speaker:  x0 = (w_spk + 1) f(c_sem, 0, psi) - w_spk f(c_sem, 0, 0)
//! ```
//!
//! The prosody form is evaluated as `(1 - w) u + w c`, which returns `c`
//! bitwise at `w = 1` and `u` bitwise at `w = 0`. The source speaker condition
//! is never supplied at inference; a pseudo-speaker `psi` from the pool takes
//! its place.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::backbone::{repeat_frames, ConditionBundle, X0Predictor};
use crate::error::{Error, Result};
use crate::schedule::{ddim_step, ddim_timestep_grid, NoiseSchedule};
use crate::seed::{randn, Rng};
use crate::tensor::Tensor;
use crate::world::{ToyUtterance, World};

/// Largest prosody weight accepted; values above 1 extrapolate.
pub const MAX_W_PRO: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GuidanceMode {
    ProsodyCfg,
    SpeakerCfg,
    Plain,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::ProsodyCfg => "prosody-cfg",
            GuidanceMode::SpeakerCfg => "speaker-cfg",
            GuidanceMode::Plain => "plain",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub w_pro: f64,
    pub w_spk: f64,
    pub pseudo_speaker: Option<Vec<f64>>,
    /// Plain mode only: supply the source prosody condition.
    pub with_prosody: bool,
    /// Per-channel (or scalar) offset added to the source prosody condition.
    pub prosody_shift: Option<Vec<f64>>,
    pub n_infer_steps: usize,
}

impl GuidanceSpec {
    pub fn prosody_cfg(w_pro: f64, psi: Vec<f64>, n_infer_steps: usize) -> Self {
        GuidanceSpec {
            mode: GuidanceMode::ProsodyCfg,
            w_pro,
            w_spk: 0.0,
            pseudo_speaker: Some(psi),
            with_prosody: true,
            prosody_shift: None,
            n_infer_steps,
        }
    }

    pub fn speaker_cfg(w_spk: f64, psi: Vec<f64>, n_infer_steps: usize) -> Self {
        GuidanceSpec {
            mode: GuidanceMode::SpeakerCfg,
            w_pro: 0.0,
            w_spk,
            pseudo_speaker: Some(psi),
            with_prosody: false,
            prosody_shift: None,
            n_infer_steps,
        }
    }

    /// One forward pass per step with `(c_sem, c_pro or null, psi or null)`.
    pub fn plain(with_prosody: bool, psi: Option<Vec<f64>>, n_infer_steps: usize) -> Self {
        GuidanceSpec {
            mode: GuidanceMode::Plain,
            w_pro: if with_prosody { 1.0 } else { 0.0 },
            w_spk: 0.0,
            pseudo_speaker: psi,
            with_prosody,
            prosody_shift: None,
            n_infer_steps,
        }
    }

    pub fn with_prosody_shift(mut self, shift: Vec<f64>) -> Self {
        self.prosody_shift = Some(shift);
        self
    }

    fn uses_prosody(&self) -> bool {
        match self.mode {
            GuidanceMode::ProsodyCfg => true,
            GuidanceMode::SpeakerCfg => false,
            GuidanceMode::Plain => self.with_prosody,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Guidance(m));
        if !(0.0..=MAX_W_PRO).contains(&self.w_pro) {
            return bad(format!("w_pro must lie in [0, {MAX_W_PRO}], got {}", self.w_pro));
        }
        if !(self.w_spk >= 0.0 && self.w_spk.is_finite()) {
            return bad(format!("w_spk must be a non-negative number, got {}", self.w_spk));
        }
        if self.n_infer_steps == 0 {
            return bad("at least one inference step is required".into());
        }
        if self.mode != GuidanceMode::Plain && self.pseudo_speaker.is_none() {
            return bad(format!("{} needs a pseudo-speaker", self.mode.as_str()));
        }
        if self.mode == GuidanceMode::SpeakerCfg && self.with_prosody {
            return bad("speaker-cfg keeps the prosody condition null".into());
        }
        if self.prosody_shift.is_some() && !self.uses_prosody() {
            return bad("a prosody shift needs the prosody condition".into());
        }
        if self.pseudo_speaker.as_ref().is_some_and(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("pseudo-speaker"));
        }
        Ok(())
    }
}

/// `(1 - w) uncond + w cond`, elementwise.
pub fn combine_prosody(uncond: &Tensor, cond: &Tensor, w: f64) -> Result<Tensor> {
    uncond.zip_map(cond, |u, c| (1.0 - w) * u + w * c)
}

/// `(w + 1) cond - w uncond`, elementwise.
pub fn combine_speaker(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    cond.zip_map(uncond, |c, u| (w + 1.0) * c - w * u)
}

/// Prosody-guided x0 estimate from exactly two forward passes.
pub fn cfg_prosody<M: X0Predictor + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    c_sem: &Tensor,
    c_pro: &Tensor,
    psi: &Tensor,
    w_pro: f64,
) -> Result<Tensor> {
    let uncond = model.predict_x0(x_t, t, &ConditionBundle::new(c_sem.clone(), None, Some(psi.clone())))?;
    let cond = model.predict_x0(x_t, t, &ConditionBundle::new(c_sem.clone(), Some(c_pro.clone()), Some(psi.clone())))?;
    combine_prosody(&uncond, &cond, w_pro)
}

/// Pseudo-speaker-guided x0 estimate with the prosody condition null.
pub fn cfg_speaker<M: X0Predictor + ?Sized>(model: &M, x_t: &Tensor, t: usize, c_sem: &Tensor, psi: &Tensor, w_spk: f64) -> Result<Tensor> {
    let cond = model.predict_x0(x_t, t, &ConditionBundle::new(c_sem.clone(), None, Some(psi.clone())))?;
    let uncond = model.predict_x0(x_t, t, &ConditionBundle::new(c_sem.clone(), None, None))?;
    combine_speaker(&cond, &uncond, w_spk)
}

/// Adds `delta` to every frame: one value per channel, or a single value for all.
pub fn prosody_mean_shift(c_pro: &Tensor, delta: &[f64]) -> Result<Tensor> {
    let c = c_pro.channels();
    if delta.len() != 1 && delta.len() != c {
        return Err(Error::ShapeMismatch { op: "prosody_mean_shift", lhs: c_pro.shape().to_vec(), rhs: alloc::vec![delta.len()] });
    }
    let l = c_pro.frames();
    let d = |j: usize| if delta.len() == 1 { delta[0] } else { delta[j / l] };
    Ok(Tensor::from_fn(c_pro.shape(), |j| c_pro.data()[j] + d(j)))
}

/// Pseudo-speakers as `(speaker label, mean utterance embedding)`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PseudoSpeakerPool {
    entries: Vec<(usize, Vec<f64>)>,
}

/// Utterance-level speaker embedding: the frame mean of a `[dim, L]` condition.
pub fn utterance_embedding(c_spk: &Tensor) -> Vec<f64> {
    let l = c_spk.frames() as f64;
    (0..c_spk.channels()).map(|i| c_spk.row(i).iter().sum::<f64>() / l).collect()
}

impl PseudoSpeakerPool {
    /// Averages each speaker's per-utterance embeddings.
    pub fn from_embeddings(groups: Vec<(usize, Vec<Vec<f64>>)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(groups.len());
        for (label, embs) in groups {
            let Some(first) = embs.first() else {
                return Err(Error::Config(format!("pool speaker {label} has no utterances")));
            };
            let dim = first.len();
            if embs.iter().any(|e| e.len() != dim) {
                return Err(Error::Config(format!("pool speaker {label} has embeddings of differing size")));
            }
            let n = embs.len() as f64;
            let mean = (0..dim).map(|i| embs.iter().map(|e| e[i]).sum::<f64>() / n).collect();
            entries.push((label, mean));
        }
        if entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(PseudoSpeakerPool { entries })
    }

    /// Pool built from `per_speaker` generated utterances of each training speaker.
    pub fn from_world(world: &World, per_speaker: usize, rng: &mut Rng) -> Result<Self> {
        let groups = world
            .pool_speakers()
            .map(|k| {
                let embs = (0..per_speaker)
                    .map(|_| world.generate_utterance(k, rng).map(|u| utterance_embedding(&u.c_spk)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((k, embs))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_embeddings(groups)
    }

    pub fn entries(&self) -> &[(usize, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: usize) -> Option<&[f64]> {
        self.entries.iter().find(|(l, _)| *l == label).map(|(_, e)| e.as_slice())
    }

    /// Uniform draw.
    pub fn sample(&self, rng: &mut Rng) -> Result<(usize, &[f64])> {
        if self.entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        let (label, emb) = &self.entries[rng.random_range(0..self.entries.len())];
        Ok((*label, emb))
    }
}

/// x0 estimate at one step under `spec`; `c_pro` is the (possibly shifted) source prosody.
fn guided_x0<M: X0Predictor + ?Sized>(
    model: &M,
    spec: &GuidanceSpec,
    x_t: &Tensor,
    t: usize,
    c_sem: &Tensor,
    c_pro: &Tensor,
    psi: Option<&Tensor>,
) -> Result<Tensor> {
    match (spec.mode, psi) {
        (GuidanceMode::ProsodyCfg, Some(psi)) => cfg_prosody(model, x_t, t, c_sem, c_pro, psi, spec.w_pro),
        (GuidanceMode::SpeakerCfg, Some(psi)) => cfg_speaker(model, x_t, t, c_sem, psi, spec.w_spk),
        (GuidanceMode::Plain, psi) => {
            let conds = ConditionBundle::new(c_sem.clone(), spec.with_prosody.then(|| c_pro.clone()), psi.cloned());
            model.predict_x0(x_t, t, &conds)
        }
        _ => Err(Error::Guidance("missing pseudo-speaker".into())),
    }
}

/// Runs the guided DDIM sampler from `x_T ~ N(0, I)` drawn from `rng`.
///
/// The source content condition is always supplied; the source speaker
/// condition never is.
pub fn anonymize<M: X0Predictor + ?Sized>(model: &M, sched: &NoiseSchedule, spec: &GuidanceSpec, source: &ToyUtterance, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let l = source.c_sem.frames();
    let psi = spec.pseudo_speaker.as_ref().map(|p| repeat_frames(p, l));
    let c_pro = match &spec.prosody_shift {
        Some(d) => prosody_mean_shift(&source.c_pro, d)?,
        None => source.c_pro.clone(),
    };
    let mut x = randn(source.c_sem.shape(), rng);
    for (t, t_prev) in ddim_timestep_grid(sched.steps(), spec.n_infer_steps)? {
        let x0 = guided_x0(model, spec, &x, t, &source.c_sem, &c_pro, psi.as_ref())?;
        x = ddim_step(&x, t, t_prev, &x0, sched)?;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("anonymized embedding"));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, DenoiserModel};
    use crate::schedule::ScheduleConfig;
    use crate::seed::rng;
    use crate::world::WorldConfig;
    use alloc::vec;

    /// `x0 = 0.5 x_t + sum of row means of the supplied conditions`.
    struct Linear;

    impl X0Predictor for Linear {
        fn predict_x0(&self, x_t: &Tensor, _t: usize, c: &ConditionBundle) -> Result<Tensor> {
            let m = |o: &Option<Tensor>| o.as_ref().map_or(0.0, Tensor::mean);
            let k = c.c_sem.mean() + 2.0 * m(&c.c_pro) - 3.0 * m(&c.c_spk);
            Ok(x_t.map(|v| 0.5 * v + k))
        }
    }

    fn random_model() -> DenoiserModel {
        let cfg = BackboneConfig { n_blocks: 2, kernel: 3, ..BackboneConfig::toy() };
        let mut m = DenoiserModel::new(cfg, &mut rng(8)).unwrap();
        let n = m.params().len();
        let mut r = rng(9);
        m.params_mut()[n - 2] = randn(&[32, 32, 1], &mut r).map(|v| 0.2 * v);
        m
    }

    fn fixtures() -> (World, NoiseSchedule, ToyUtterance, Vec<f64>) {
        let w = World::generate(WorldConfig { frames: 16, ..WorldConfig::default() }).unwrap();
        let sched = ScheduleConfig::toy().build().unwrap();
        let u = w.generate_utterance(10, &mut rng(1)).unwrap();
        let psi = w.bank.vectors[2].clone();
        (w, sched, u, psi)
    }

    fn t(vals: &[f64]) -> Tensor {
        Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn prosody_combinator_identities() {
        let (u, c) = (t(&[0.3, -1.7, 2.2]), t(&[1.1, 0.4, -0.9]));
        assert!(combine_prosody(&u, &c, 1.0).unwrap().bitwise_eq(&c));
        assert!(combine_prosody(&u, &c, 0.0).unwrap().bitwise_eq(&u));
        let mid = combine_prosody(&u, &c, 0.5).unwrap();
        for ((m, a), b) in mid.data().iter().zip(u.data()).zip(c.data()) {
            assert!((m - (a + b) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prosody_combinator_is_affine_in_w() {
        let (u, c) = (t(&[0.3, -1.7, 2.2]), t(&[1.1, 0.4, -0.9]));
        let at = |w| combine_prosody(&u, &c, w).unwrap();
        let (a, b, d) = (at(0.0), at(1.0), at(2.0));
        for j in 0..3 {
            let slope = c.data()[j] - u.data()[j];
            assert!((b.data()[j] - a.data()[j] - slope).abs() < 1e-12);
            assert!((d.data()[j] - b.data()[j] - slope).abs() < 1e-12);
        }
    }

    #[test]
    fn speaker_combinator_identities() {
        let (c, u) = (t(&[0.3, -1.7, 2.2]), t(&[1.1, 0.4, -0.9]));
        assert!(combine_speaker(&c, &u, 0.0).unwrap().bitwise_eq(&c));
        let same = combine_speaker(&c, &c, 3.0).unwrap();
        assert!(same.max_abs_diff(&c) < 1e-12);
        let three = combine_speaker(&c, &u, 3.0).unwrap();
        assert!((three.data()[0] - (4.0 * 0.3 - 3.0 * 1.1)).abs() < 1e-12);
    }

    #[test]
    fn cfg_functions_use_the_right_bundles() {
        let x = t(&[1.0, 2.0]);
        let sem = t(&[0.0, 0.0]);
        let (pro, psi) = (t(&[1.0, 1.0]), t(&[1.0, 1.0]));
        // uncond: 0.5x - 3, cond: 0.5x - 1
        let out = cfg_prosody(&Linear, &x, 5, &sem, &pro, &psi, 0.5).unwrap();
        assert_eq!(out.data(), &[-1.5, -1.0]);
        // cond: 0.5x - 3, uncond: 0.5x -> 4 cond - 3 uncond = 0.5x - 12
        let out = cfg_speaker(&Linear, &x, 5, &sem, &psi, 3.0).unwrap();
        assert_eq!(out.data(), &[-11.5, -11.0]);
    }

    #[test]
    fn spec_validation() {
        let psi = vec![0.0; 8];
        assert!(GuidanceSpec::prosody_cfg(2.5, psi.clone(), 10).validate().is_err());
        assert!(GuidanceSpec::prosody_cfg(-0.1, psi.clone(), 10).validate().is_err());
        assert!(GuidanceSpec::prosody_cfg(1.5, psi.clone(), 10).validate().is_ok());
        assert!(GuidanceSpec::speaker_cfg(-1.0, psi.clone(), 10).validate().is_err());
        assert!(GuidanceSpec::prosody_cfg(1.0, psi.clone(), 0).validate().is_err());
        let mut s = GuidanceSpec::speaker_cfg(3.0, psi.clone(), 10);
        s.pseudo_speaker = None;
        assert!(s.validate().is_err());
        let mut s = GuidanceSpec::speaker_cfg(3.0, psi.clone(), 10);
        s.with_prosody = true;
        assert!(s.validate().is_err());
        assert!(GuidanceSpec::plain(false, None, 10).with_prosody_shift(vec![1.0]).validate().is_err());
        assert!(GuidanceSpec::plain(false, None, 10).validate().is_ok());
    }

    #[test]
    fn pool_sampling() {
        let one = PseudoSpeakerPool::from_embeddings(vec![(4, vec![vec![1.0], vec![3.0]])]).unwrap();
        assert_eq!(one.get(4), Some(&[2.0][..]));
        let mut r = rng(0);
        assert!((0..20).all(|_| one.sample(&mut r).unwrap().0 == 4));

        let ten = PseudoSpeakerPool::from_embeddings((0..10).map(|k| (k, vec![vec![k as f64]])).collect()).unwrap();
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[ten.sample(&mut r).unwrap().0] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 10_000.0 - 0.1).abs() < 0.03), "{counts:?}");

        let draw = |s| {
            let mut r = rng(s);
            (0..32).map(|_| ten.sample(&mut r).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_eq!(PseudoSpeakerPool::from_embeddings(vec![]), Err(Error::EmptyPool));
    }

    #[test]
    fn world_pool_uses_training_speakers() {
        let (w, ..) = fixtures();
        let pool = PseudoSpeakerPool::from_world(&w, 3, &mut rng(0)).unwrap();
        assert_eq!(pool.len(), w.config.n_pool_speakers);
        for (k, e) in pool.entries() {
            assert!(w.pool_speakers().contains(k));
            let d: f64 = e.iter().zip(&w.bank.vectors[*k]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn mean_shift_properties() {
        let c = Tensor::from_fn(&[2, 5], |j| (j as f64 * 0.7).sin());
        assert!(prosody_mean_shift(&c, &[0.0]).unwrap().bitwise_eq(&c));
        let s = prosody_mean_shift(&c, &[0.5, -2.0]).unwrap();
        for ch in 0..2 {
            for (i, j) in [(0, 3), (1, 4), (2, 0)] {
                let before = c.get2(ch, i) - c.get2(ch, j);
                let after = s.get2(ch, i) - s.get2(ch, j);
                assert!((before - after).abs() < 1e-12);
            }
        }
        assert!(prosody_mean_shift(&c, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn end_to_end_identities_are_bitwise() {
        let (_, sched, u, psi) = fixtures();
        let m = random_model();
        let run = |spec: &GuidanceSpec| anonymize(&m, &sched, spec, &u, &mut rng(77)).unwrap();
        let full = run(&GuidanceSpec::plain(true, Some(psi.clone()), 10));
        let null_psi = run(&GuidanceSpec::plain(false, Some(psi.clone()), 10));
        assert!(!full.bitwise_eq(&null_psi));
        assert!(run(&GuidanceSpec::prosody_cfg(1.0, psi.clone(), 10)).bitwise_eq(&full));
        assert!(run(&GuidanceSpec::prosody_cfg(0.0, psi.clone(), 10)).bitwise_eq(&null_psi));
        assert!(run(&GuidanceSpec::speaker_cfg(0.0, psi.clone(), 10)).bitwise_eq(&null_psi));
    }

    #[test]
    fn anonymize_is_deterministic() {
        let (_, sched, u, _) = fixtures();
        let m = random_model();
        let spec = GuidanceSpec::plain(false, None, 8);
        let a = anonymize(&m, &sched, &spec, &u, &mut rng(3)).unwrap();
        let b = anonymize(&m, &sched, &spec, &u, &mut rng(3)).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.shape(), u.x0.shape());
    }

    #[test]
    fn weight_sweep_moves_away_from_conditional_output() {
        let (_, sched, u, psi) = fixtures();
        let m = random_model();
        let run = |spec: &GuidanceSpec| anonymize(&m, &sched, spec, &u, &mut rng(12)).unwrap();
        let reference = run(&GuidanceSpec::plain(true, Some(psi.clone()), 10));
        let dists: Vec<f64> = [1.0, 0.8, 0.5, 0.2, 0.0]
            .iter()
            .map(|&w| run(&GuidanceSpec::prosody_cfg(w, psi.clone(), 10)).zip_map(&reference, |a, b| a - b).unwrap().norm_sq())
            .collect();
        assert_eq!(dists[0], 0.0);
        assert!(dists.windows(2).all(|p| p[1] > p[0]), "{dists:?}");
    }

    #[test]
    fn shifted_prosody_changes_output() {
        let (w, sched, u, psi) = fixtures();
        let m = random_model();
        let base = GuidanceSpec::prosody_cfg(1.0, psi, 6);
        let shifted = base.clone().with_prosody_shift(w.prosody_shift_vector(1.0));
        let a = anonymize(&m, &sched, &base, &u, &mut rng(1)).unwrap();
        let b = anonymize(&m, &sched, &shifted, &u, &mut rng(1)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }
}
