//! Privacy and utility metrics and the guidance-weight sweep.
//!
//! Privacy is the equal error rate of a verification attacker. Its embedding of
//! an utterance is the world's least-squares speaker estimate concatenated with
//! a prosody signature, the projection of the recovered prosody trajectory onto
//! the low-order intonation basis. The signature lets the attacker exploit
//! identity leaking through prosody, which the speaker subspace alone cannot
//! see. Trials are scored by cosine similarity against per-speaker enrollment
//! centroids: built from original utterances for the lazy attacker and from
//! anonymized ones (independent pseudo-speaker draws) for the semi-informed
//! attacker.
//!
//! Utility is the mean Spearman correlation between source and recovered
//! prosody trajectories, and the mean-square error of the recovered semantic
//! part against the source content condition.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::backbone::X0Predictor;
use crate::error::{Error, Result};
use crate::guidance::{anonymize, GuidanceMode, GuidanceSpec, PseudoSpeakerPool};
use crate::schedule::NoiseSchedule;
use crate::seed::{labeled_rng, Rng};
use crate::tensor::Tensor;
use crate::world::{contour_basis, ToyUtterance, World, CONTOUR_BASIS};

/// Equal error rate in percent, folded into `[0, 50]`.
///
/// A trial is accepted when its score is at least the threshold. The false
/// accept and false reject rates are traced over every distinct threshold and
/// the crossing is linearly interpolated between adjacent operating points.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::NonFinite("verification scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (mut far, mut frr) = (1.0, 0.0);
    let mut curve = Vec::with_capacity(sorted.len() + 1);
    let mut i = 0;
    while i < sorted.len() {
        curve.push((far, frr));
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                frr += 1.0 / n_pos as f64;
            } else {
                far -= 1.0 / n_neg as f64;
            }
            i += 1;
        }
    }
    curve.push((0.0, 1.0));

    let k = curve.iter().position(|&(a, r)| a - r <= 0.0).expect("curve ends with far < frr");
    let (a1, r1) = curve[k];
    let eer = if a1 == r1 {
        a1
    } else {
        let (a0, r0) = curve[k - 1];
        let (d0, d1) = (a0 - r0, a1 - r1);
        let alpha = d0 / (d0 - d1);
        a0 + alpha * (a1 - a0)
    };
    let pct = 100.0 * eer;
    Ok(if pct > 50.0 { 100.0 - pct } else { pct })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant or lengths differ.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / libm::sqrt(na * nb)
    }
}

/// Verification attacker embedding `[s_hat ; prosody_weight * signature(p_hat)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Attacker {
    pub prosody_weight: f64,
}

impl Default for Attacker {
    fn default() -> Self {
        Attacker { prosody_weight: 1.0 }
    }
}

impl Attacker {
    pub fn embed(&self, world: &World, x: &Tensor) -> Result<Vec<f64>> {
        let f = world.project_factors(x)?;
        let l = f.prosody.len();
        let mut e = f.speaker;
        for j in 0..CONTOUR_BASIS {
            let sig: f64 = f.prosody.iter().enumerate().map(|(i, p)| p * contour_basis(j, i, l)).sum::<f64>() / l as f64;
            e.push(self.prosody_weight * sig);
        }
        Ok(e)
    }

    /// Mean embedding per speaker, in order of first appearance.
    pub fn centroids(&self, world: &World, enrollment: &[(usize, &Tensor)]) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut sums: Vec<(usize, Vec<f64>, usize)> = Vec::new();
        for (spk, x) in enrollment {
            let e = self.embed(world, x)?;
            match sums.iter_mut().find(|s| s.0 == *spk) {
                Some(s) => {
                    s.1.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
                    s.2 += 1;
                }
                None => sums.push((*spk, e, 1)),
            }
        }
        Ok(sums.into_iter().map(|(k, s, n)| (k, s.into_iter().map(|v| v / n as f64).collect())).collect())
    }
}

/// A verification trial: does trial utterance `trial` belong to `speaker`?
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialPair {
    pub speaker: usize,
    pub trial: usize,
}

/// Every (enrolled speaker, trial utterance) pair, subsampled to at most `cap`
/// with `rng` and returned in canonical order.
pub fn build_trials(enrolled: &[usize], trial_speakers: &[usize], cap: usize, rng: &mut Rng) -> Vec<TrialPair> {
    let mut pairs: Vec<TrialPair> =
        enrolled.iter().flat_map(|&speaker| (0..trial_speakers.len()).map(move |trial| TrialPair { speaker, trial })).collect();
    if pairs.len() > cap {
        pairs.shuffle(rng);
        pairs.truncate(cap);
        pairs.sort_by_key(|p| (p.trial, p.speaker));
    }
    pairs
}

/// Cosine scores of trial utterances against enrollment centroids, labelled
/// with whether the trial speaker is the enrolled one.
pub fn speaker_attack(
    attacker: &Attacker,
    world: &World,
    enrollment: &[(usize, &Tensor)],
    trials: &[(usize, &Tensor)],
    pairs: &[TrialPair],
) -> Result<Vec<(f64, bool)>> {
    let centroids = attacker.centroids(world, enrollment)?;
    if centroids.len() < 2 {
        return Err(Error::Eval(format!("need at least 2 enrolled speakers, got {}", centroids.len())));
    }
    let embeds = trials.iter().map(|(_, x)| attacker.embed(world, x)).collect::<Result<Vec<_>>>()?;
    pairs
        .iter()
        .map(|p| {
            let c = centroids
                .iter()
                .find(|c| c.0 == p.speaker)
                .ok_or_else(|| Error::Eval(format!("speaker {} not enrolled", p.speaker)))?;
            let (spk, _) = trials.get(p.trial).ok_or_else(|| Error::Eval(format!("trial {} out of range", p.trial)))?;
            Ok((cosine(&embeds[p.trial], &c.1), *spk == p.speaker))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProsodyUtility {
    /// Mean Spearman correlation over utterances with defined ranks.
    pub mean: f64,
    /// Utterances skipped because a trajectory was constant.
    pub skipped: usize,
}

fn check_aligned(originals: &[ToyUtterance], anonymized: &[Tensor]) -> Result<()> {
    if originals.len() != anonymized.len() || originals.is_empty() {
        return Err(Error::Eval(format!("{} originals vs {} anonymized outputs", originals.len(), anonymized.len())));
    }
    Ok(())
}

pub fn prosody_utility(world: &World, originals: &[ToyUtterance], anonymized: &[Tensor]) -> Result<ProsodyUtility> {
    check_aligned(originals, anonymized)?;
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for (o, x) in originals.iter().zip(anonymized) {
        let p_hat = world.project_factors(x)?.prosody;
        match spearman(o.prosody.data(), &p_hat) {
            Some(r) => {
                sum += r;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    if n == 0 {
        return Err(Error::Eval("every prosody trajectory was constant".into()));
    }
    Ok(ProsodyUtility { mean: sum / n as f64, skipped })
}

pub fn content_utility(world: &World, originals: &[ToyUtterance], anonymized: &[Tensor]) -> Result<f64> {
    check_aligned(originals, anonymized)?;
    let mut total = 0.0;
    for (o, x) in originals.iter().zip(anonymized) {
        let sem = world.project_factors(x)?.semantic;
        total += sem.zip_map(&o.c_sem, |a, b| (a - b) * (a - b))?.mean();
    }
    Ok(total / originals.len() as f64)
}

/// Accuracy of a nearest-centroid speaker classifier on flattened prosody
/// conditions, over all speakers. Chance is `1 / n_speakers`.
pub fn leakage_probe(world: &World, train_per_speaker: usize, test_per_speaker: usize, seed: u64) -> Result<f64> {
    let n = world.config.n_speakers;
    let mut centroids = Vec::with_capacity(n);
    for k in 0..n {
        let mut r = labeled_rng(seed, "probe-train", k as u64);
        let mut c = vec![0.0; world.config.cond_pro_dim * world.config.frames];
        for _ in 0..train_per_speaker {
            let u = world.generate_utterance(k, &mut r)?;
            c.iter_mut().zip(u.c_pro.data()).for_each(|(a, b)| *a += b / train_per_speaker as f64);
        }
        centroids.push(c);
    }
    let mut correct = 0usize;
    for k in 0..n {
        let mut r = labeled_rng(seed, "probe-test", k as u64);
        for _ in 0..test_per_speaker {
            let u = world.generate_utterance(k, &mut r)?;
            let dist = |c: &Vec<f64>| c.iter().zip(u.c_pro.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..n).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).expect("speakers");
            correct += (best == k) as usize;
        }
    }
    Ok(correct as f64 / (n * test_per_speaker) as f64)
}

/// One row of the trade-off table.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OperatingPoint {
    /// Prosody guidance at the given weight.
    Prosody(f64),
    /// Plain `(c_sem, null, psi)`.
    NullPsi,
    /// Plain `(c_sem, null, null)`.
    NullNull,
    /// Pseudo-speaker guidance at the given weight, prosody null.
    Speaker(f64),
    /// Prosody guidance at the given weight on a mean-shifted prosody condition.
    ProsodyShift(f64),
}

impl OperatingPoint {
    pub fn mode(&self) -> &'static str {
        match self {
            OperatingPoint::Prosody(_) => "prosody-cfg",
            OperatingPoint::NullPsi => "null-psi",
            OperatingPoint::NullNull => "null-null",
            OperatingPoint::Speaker(_) => "speaker-cfg",
            OperatingPoint::ProsodyShift(_) => "prosody-cfg-shift",
        }
    }

    pub fn w_pro(&self) -> Option<f64> {
        match *self {
            OperatingPoint::Prosody(w) | OperatingPoint::ProsodyShift(w) => Some(w),
            _ => None,
        }
    }

    pub fn w_spk(&self) -> Option<f64> {
        match *self {
            OperatingPoint::Speaker(w) => Some(w),
            _ => None,
        }
    }

    pub fn spec(&self, psi: &[f64], n_infer: usize, shift: &[f64]) -> GuidanceSpec {
        let psi = psi.to_vec();
        match *self {
            OperatingPoint::Prosody(w) => GuidanceSpec::prosody_cfg(w, psi, n_infer),
            OperatingPoint::NullPsi => GuidanceSpec::plain(false, Some(psi), n_infer),
            OperatingPoint::NullNull => GuidanceSpec::plain(false, None, n_infer),
            OperatingPoint::Speaker(w) => GuidanceSpec::speaker_cfg(w, psi, n_infer),
            OperatingPoint::ProsodyShift(w) => GuidanceSpec::prosody_cfg(w, psi, n_infer).with_prosody_shift(shift.to_vec()),
        }
    }
}

pub const DEFAULT_WEIGHTS: [f64; 5] = [1.0, 0.8, 0.5, 0.2, 0.0];
pub const STRONG_SPEAKER_WEIGHT: f64 = 3.0;

/// The weight points followed by null/psi, null/null, speaker guidance at
/// `w_spk = 3`, and mean-shifted prosody at `w_pro = 1`.
pub fn operating_points(weights: &[f64]) -> Vec<OperatingPoint> {
    let mut pts: Vec<OperatingPoint> = weights.iter().map(|&w| OperatingPoint::Prosody(w)).collect();
    pts.extend([
        OperatingPoint::NullPsi,
        OperatingPoint::NullNull,
        OperatingPoint::Speaker(STRONG_SPEAKER_WEIGHT),
        OperatingPoint::ProsodyShift(1.0),
    ]);
    pts
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    pub n_utt: usize,
    pub seed: u64,
    pub n_infer: usize,
    /// Original enrollment utterances per evaluation speaker.
    pub n_enroll: usize,
    pub max_trials: usize,
    /// Utterances averaged into each pseudo-speaker.
    pub pool_utts: usize,
    /// Mean shift of the normalised prosody, in units of its standard deviation.
    pub shift_std: f64,
    pub attacker: Attacker,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_utt: 200, seed: 0, n_infer: 25, n_enroll: 5, max_trials: 2000, pool_utts: 5, shift_std: 1.0, attacker: Attacker::default() }
    }
}

/// Source utterances, trials and pseudo-speaker pool shared by every operating point.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub enroll: Vec<ToyUtterance>,
    pub trials: Vec<ToyUtterance>,
    pub pairs: Vec<TrialPair>,
    pub pool: PseudoSpeakerPool,
    /// Per-channel prosody-condition shift of the mean-shift point.
    pub shift: Vec<f64>,
}

impl EvalSet {
    pub fn build(world: &World, cfg: &EvalConfig) -> Result<Self> {
        if cfg.n_utt == 0 || cfg.n_enroll == 0 {
            return Err(Error::Eval("need at least one trial and one enrollment utterance".into()));
        }
        let speakers: Vec<usize> = world.eval_speakers().collect();
        let enroll = speakers
            .iter()
            .flat_map(|&k| (0..cfg.n_enroll).map(move |j| (k, j)))
            .enumerate()
            .map(|(i, (k, _))| world.generate_utterance(k, &mut labeled_rng(cfg.seed, "enroll", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let trials = (0..cfg.n_utt)
            .map(|i| world.generate_utterance(speakers[i % speakers.len()], &mut labeled_rng(cfg.seed, "trial", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let trial_speakers: Vec<usize> = trials.iter().map(|u| u.speaker).collect();
        let pairs = build_trials(&speakers, &trial_speakers, cfg.max_trials, &mut labeled_rng(cfg.seed, "pairs", 0));
        let pool = PseudoSpeakerPool::from_world(world, cfg.pool_utts, &mut labeled_rng(cfg.seed, "pool", 0))?;

        let normalised: Vec<f64> = trials
            .iter()
            .flat_map(|u| {
                let contour = world.contour(u.speaker);
                let keep = 1.0 - world.config.leakage;
                u.prosody.data().iter().zip(contour).map(move |(p, c)| p - keep * c).collect::<Vec<_>>()
            })
            .collect();
        let n = normalised.len() as f64;
        let mean = normalised.iter().sum::<f64>() / n;
        let std = libm::sqrt(normalised.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
        let shift = world.prosody_shift_vector(cfg.shift_std * std);
        Ok(EvalSet { enroll, trials, pairs, pool, shift })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub mode: String,
    pub w_pro: Option<f64>,
    pub w_spk: Option<f64>,
    /// Lazy attacker EER, percent.
    pub eer: f64,
    /// Semi-informed attacker EER, percent.
    pub eer_semi: f64,
    pub prosody_corr: f64,
    pub prosody_skipped: usize,
    pub content_err: f64,
    pub n_utt: usize,
    pub n_trials: usize,
    pub n_target_trials: usize,
    pub n_infer: usize,
    pub seed: u64,
}

/// Anonymizes `sources` under `point`; utterance `i` draws its pseudo-speaker
/// and sampler noise from streams labelled by `label` and `i`, so every
/// operating point sees the same random numbers.
pub fn anonymize_all<M: X0Predictor + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    set: &EvalSet,
    point: OperatingPoint,
    sources: &[ToyUtterance],
    label: &str,
    cfg: &EvalConfig,
) -> Result<Vec<Tensor>> {
    sources
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let (_, psi) = set.pool.sample(&mut labeled_rng(cfg.seed, &format!("{label}-psi"), i as u64))?;
            let spec = point.spec(psi, cfg.n_infer, &set.shift);
            anonymize(model, sched, &spec, u, &mut labeled_rng(cfg.seed, &format!("{label}-noise"), i as u64))
        })
        .collect()
}

pub fn evaluate_point<M: X0Predictor + ?Sized>(
    model: &M,
    world: &World,
    sched: &NoiseSchedule,
    set: &EvalSet,
    point: OperatingPoint,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let anon = anonymize_all(model, sched, set, point, &set.trials, "trial", cfg)?;
    let anon_enroll = anonymize_all(model, sched, set, point, &set.enroll, "enroll", cfg)?;
    metrics_for(world, set, point, cfg, &anon, &anon_enroll)
}

/// Metrics for already anonymized trial and enrollment utterances.
pub fn metrics_for(
    world: &World,
    set: &EvalSet,
    point: OperatingPoint,
    cfg: &EvalConfig,
    anon: &[Tensor],
    anon_enroll: &[Tensor],
) -> Result<MetricsReport> {
    let trials: Vec<(usize, &Tensor)> = set.trials.iter().map(|u| u.speaker).zip(anon).collect();
    let lazy_enroll: Vec<(usize, &Tensor)> = set.enroll.iter().map(|u| (u.speaker, &u.x0)).collect();
    let semi_enroll: Vec<(usize, &Tensor)> = set.enroll.iter().map(|u| u.speaker).zip(anon_enroll).collect();
    let lazy = speaker_attack(&cfg.attacker, world, &lazy_enroll, &trials, &set.pairs)?;
    let semi = speaker_attack(&cfg.attacker, world, &semi_enroll, &trials, &set.pairs)?;
    let pro = prosody_utility(world, &set.trials, anon)?;
    Ok(MetricsReport {
        mode: point.mode().to_string(),
        w_pro: point.w_pro(),
        w_spk: point.w_spk(),
        eer: compute_eer(&lazy)?,
        eer_semi: compute_eer(&semi)?,
        prosody_corr: pro.mean,
        prosody_skipped: pro.skipped,
        content_err: content_utility(world, &set.trials, anon)?,
        n_utt: set.trials.len(),
        n_trials: lazy.len(),
        n_target_trials: lazy.iter().filter(|s| s.1).count(),
        n_infer: cfg.n_infer,
        seed: cfg.seed,
    })
}

/// Evaluates `operating_points(weights)` in order.
pub fn sweep_tradeoff<M: X0Predictor + ?Sized>(
    model: &M,
    world: &World,
    sched: &NoiseSchedule,
    weights: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<MetricsReport>> {
    let set = EvalSet::build(world, cfg)?;
    operating_points(weights).into_iter().map(|p| evaluate_point(model, world, sched, &set, p, cfg)).collect()
}

/// Adjacent pairs moving against `expected_sign` and the size of the worst one.
pub fn monotone_violations(values: &[f64], expected_sign: f64) -> (usize, f64) {
    values.windows(2).fold((0, 0.0), |(n, worst), w| {
        let step = expected_sign * (w[1] - w[0]);
        if step < 0.0 {
            (n + 1, f64::max(worst, -step))
        } else {
            (n, worst)
        }
    })
}

/// How the prosody-guidance rows move with the weight.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TradeoffTrend {
    pub rho_w_prosody: f64,
    pub rho_w_eer: f64,
    /// Violations of nonincreasing prosody correlation as the weight falls.
    pub prosody_violations: (usize, f64),
    /// Violations of nondecreasing EER as the weight falls.
    pub eer_violations: (usize, f64),
    /// Largest content error of the weight sweep relative to the `w_pro = 1` row.
    pub content_ratio: f64,
    /// The same ratio over every report, including the speaker-guidance rows.
    pub content_ratio_all: f64,
}

/// Trend over the `prosody-cfg` rows, ordered by decreasing weight.
pub fn tradeoff_trend(reports: &[MetricsReport]) -> Result<TradeoffTrend> {
    let mut rows: Vec<&MetricsReport> = reports.iter().filter(|r| r.mode == GuidanceMode::ProsodyCfg.as_str()).collect();
    rows.sort_by(|a, b| b.w_pro.unwrap_or(0.0).total_cmp(&a.w_pro.unwrap_or(0.0)));
    if rows.len() < 2 {
        return Err(Error::Eval("a trend needs at least two weights".into()));
    }
    let w: Vec<f64> = rows.iter().map(|r| r.w_pro.unwrap_or(0.0)).collect();
    let corr: Vec<f64> = rows.iter().map(|r| r.prosody_corr).collect();
    let eer: Vec<f64> = rows.iter().map(|r| r.eer).collect();
    let reference = rows
        .iter()
        .find(|r| r.w_pro == Some(1.0))
        .ok_or_else(|| Error::Eval("no w_pro = 1 row".into()))?
        .content_err;
    let ratio = |rs: &mut dyn Iterator<Item = &MetricsReport>| rs.map(|r| r.content_err / reference).fold(0.0, f64::max);
    let content_ratio = ratio(&mut rows.iter().copied());
    let content_ratio_all = ratio(&mut reports.iter());
    Ok(TradeoffTrend {
        rho_w_prosody: spearman(&w, &corr).unwrap_or(0.0),
        rho_w_eer: spearman(&w, &eer).unwrap_or(0.0),
        prosody_violations: monotone_violations(&corr, -1.0),
        eer_violations: monotone_violations(&eer, 1.0),
        content_ratio,
        content_ratio_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{randn, rng};
    use crate::world::WorldConfig;
    use proptest::prelude::*;

    fn brute_force_eer(scores: &[(f64, bool)]) -> f64 {
        let n_pos = scores.iter().filter(|s| s.1).count() as f64;
        let n_neg = scores.len() as f64 - n_pos;
        let mut best = f64::INFINITY;
        let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
        thresholds.push(f64::INFINITY);
        for th in thresholds {
            let far = scores.iter().filter(|s| !s.1 && s.0 >= th).count() as f64 / n_neg;
            let frr = scores.iter().filter(|s| s.1 && s.0 < th).count() as f64 / n_pos;
            best = best.min(far.max(frr));
        }
        100.0 * best
    }

    #[test]
    fn separated_scores_give_zero() {
        let s = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(compute_eer(&s).unwrap(), 0.0);
    }

    #[test]
    fn identical_scores_give_fifty() {
        let mut r = rng(1);
        let s: Vec<(f64, bool)> = (0..400).map(|i| (0.3, i % 2 == 0 || rand::Rng::random_bool(&mut r, 0.1))).collect();
        assert!((compute_eer(&s).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn six_point_list_matches_threshold_scan() {
        let s = [(0.9, true), (0.7, false), (0.6, true), (0.4, false), (0.3, true), (0.1, false)];
        let e = compute_eer(&s).unwrap();
        assert!((e - 100.0 / 3.0).abs() < 1e-9, "{e}");
        assert!((brute_force_eer(&s) - e).abs() < 1e-9);
    }

    #[test]
    fn inverted_scores_fold_below_fifty() {
        let s = [(0.1, true), (0.2, true), (0.8, false), (0.9, false)];
        assert_eq!(compute_eer(&s).unwrap(), 0.0);
    }

    #[test]
    fn single_class_rejected() {
        assert_eq!(compute_eer(&[(0.1, true), (0.2, true)]), Err(Error::SingleClass));
        assert_eq!(compute_eer(&[]), Err(Error::SingleClass));
    }

    #[test]
    fn spearman_basics() {
        let p: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        let cube: Vec<f64> = p.iter().map(|v| v * v * v).collect();
        assert!((spearman(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&p, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&p, &cube).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&p, &[1.0; 20]), None);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn rank_oracle(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    proptest! {
        #[test]
        fn eer_symmetric_under_negation_and_flip(
            raw in prop::collection::vec((0u8..12, any::<bool>()), 2..60)
        ) {
            let s: Vec<(f64, bool)> = raw.iter().map(|&(v, l)| (v as f64 / 4.0, l)).collect();
            prop_assume!(s.iter().any(|x| x.1) && s.iter().any(|x| !x.1));
            let flipped: Vec<(f64, bool)> = s.iter().map(|&(v, l)| (-v, !l)).collect();
            let (a, b) = (compute_eer(&s).unwrap(), compute_eer(&flipped).unwrap());
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
            prop_assert!((0.0..=50.0).contains(&a));
        }

        #[test]
        fn spearman_matches_rank_then_pearson(
            raw in prop::collection::vec((0u8..8, -5.0f64..5.0), 3..40)
        ) {
            let a: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let b: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let (ra, rb) = (rank_oracle(&a), rank_oracle(&b));
            let n = ra.len() as f64;
            let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
            let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
            match spearman(&a, &b) {
                Some(r) => prop_assert!((r - cov / (va * vb).sqrt()).abs() < 1e-12),
                None => prop_assert!(va == 0.0 || vb == 0.0),
            }
        }
    }

    fn world(leakage: f64) -> World {
        World::generate(WorldConfig { leakage, ..WorldConfig::default() }).unwrap()
    }

    fn attack_setup(w: &World, n: usize) -> (Vec<ToyUtterance>, Vec<ToyUtterance>, Vec<TrialPair>) {
        let spk: Vec<usize> = w.eval_speakers().collect();
        let enroll: Vec<_> = (0..spk.len() * 5).map(|i| w.generate_utterance(spk[i / 5], &mut rng(1000 + i as u64)).unwrap()).collect();
        let trials: Vec<_> = (0..n).map(|i| w.generate_utterance(spk[i % spk.len()], &mut rng(i as u64)).unwrap()).collect();
        let ts: Vec<usize> = trials.iter().map(|u| u.speaker).collect();
        let pairs = build_trials(&spk, &ts, 2000, &mut rng(0));
        (enroll, trials, pairs)
    }

    fn eer_of(w: &World, enroll: &[ToyUtterance], trials: &[(usize, Tensor)], pairs: &[TrialPair], attacker: Attacker) -> f64 {
        let e: Vec<(usize, &Tensor)> = enroll.iter().map(|u| (u.speaker, &u.x0)).collect();
        let t: Vec<(usize, &Tensor)> = trials.iter().map(|(k, x)| (*k, x)).collect();
        compute_eer(&speaker_attack(&attacker, w, &e, &t, pairs).unwrap()).unwrap()
    }

    #[test]
    fn identity_anonymizer_is_recognised() {
        let w = world(0.5);
        let (enroll, trials, pairs) = attack_setup(&w, 80);
        let t: Vec<_> = trials.iter().map(|u| (u.speaker, u.x0.clone())).collect();
        let e = eer_of(&w, &enroll, &t, &pairs, Attacker::default());
        assert!(e < 5.0, "{e}");
    }

    #[test]
    fn noise_anonymizer_is_at_chance() {
        let w = world(0.5);
        let (enroll, trials, pairs) = attack_setup(&w, 400);
        let mut r = rng(5);
        let t: Vec<_> = trials.iter().map(|u| (u.speaker, randn(u.x0.shape(), &mut r))).collect();
        let e = eer_of(&w, &enroll, &t, &pairs, Attacker::default());
        assert!((e - 50.0).abs() <= 5.0, "{e}");
    }

    #[test]
    fn fixed_pool_vector_is_at_chance() {
        // Without prosody leakage the speaker subspace is the only cue; replace it by one pool vector.
        let w = World::generate(WorldConfig { leakage: 0.0, residual_noise_std: 0.0, ..WorldConfig::default() }).unwrap();
        let (enroll, trials, pairs) = attack_setup(&w, 400);
        let pool_vec = &w.bank.vectors[0];
        let t: Vec<_> = trials
            .iter()
            .map(|u| {
                let x = w.assemble(&u.c_sem, u.prosody.data(), pool_vec, &Tensor::zeros(u.x0.shape())).unwrap();
                (u.speaker, x)
            })
            .collect();
        let e0 = w.project_factors(&t[0].1).unwrap().speaker;
        assert!(t.iter().all(|(_, x)| w.project_factors(x).unwrap().speaker.iter().zip(&e0).all(|(a, b)| (a - b).abs() < 1e-8)));
        let e = eer_of(&w, &enroll, &t, &pairs, Attacker { prosody_weight: 0.0 });
        assert!((e - 50.0).abs() <= 5.0, "{e}");
    }

    #[test]
    fn attack_needs_two_speakers() {
        let w = world(0.5);
        let u = w.generate_utterance(9, &mut rng(0)).unwrap();
        let e = [(9, &u.x0)];
        let r = speaker_attack(&Attacker::default(), &w, &e, &e, &[TrialPair { speaker: 9, trial: 0 }]);
        assert!(matches!(r, Err(Error::Eval(_))));
    }

    #[test]
    fn trial_cap_subsamples_deterministically() {
        let spk: Vec<usize> = (0..8).collect();
        let ts: Vec<usize> = (0..300).map(|i| i % 8).collect();
        let a = build_trials(&spk, &ts, 2000, &mut rng(1));
        assert_eq!(a.len(), 2000);
        assert_eq!(a, build_trials(&spk, &ts, 2000, &mut rng(1)));
        assert_eq!(build_trials(&spk, &ts[..10], 2000, &mut rng(1)).len(), 80);
    }

    #[test]
    fn prosody_utility_oracles() {
        let w = world(0.5);
        let us: Vec<_> = (0..4).map(|i| w.generate_utterance(8 + i, &mut rng(i as u64)).unwrap()).collect();
        let clean: Vec<Tensor> = us
            .iter()
            .map(|u| w.assemble(&u.c_sem, u.prosody.data(), &w.bank.vectors[u.speaker], &Tensor::zeros(u.x0.shape())).unwrap())
            .collect();
        assert!((prosody_utility(&w, &us, &clean).unwrap().mean - 1.0).abs() < 1e-12);
        let negated: Vec<Tensor> = us
            .iter()
            .map(|u| {
                let p: Vec<f64> = u.prosody.data().iter().map(|v| -v).collect();
                w.assemble(&u.c_sem, &p, &w.bank.vectors[u.speaker], &Tensor::zeros(u.x0.shape())).unwrap()
            })
            .collect();
        assert!((prosody_utility(&w, &us, &negated).unwrap().mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn content_utility_oracles() {
        let w = World::generate(WorldConfig { residual_noise_std: 0.0, ..WorldConfig::default() }).unwrap();
        let us: Vec<_> = (0..3).map(|i| w.generate_utterance(8 + i, &mut rng(i as u64)).unwrap()).collect();
        let same: Vec<Tensor> = us.iter().map(|u| u.x0.clone()).collect();
        assert!(content_utility(&w, &us, &same).unwrap() < 1e-16);
        let zeros: Vec<Tensor> = us.iter().map(|u| Tensor::zeros(u.x0.shape())).collect();
        let expect = us.iter().map(|u| u.c_sem.norm_sq() / u.c_sem.len() as f64).sum::<f64>() / 3.0;
        assert!((content_utility(&w, &us, &zeros).unwrap() - expect).abs() < 1e-12);

        // Random outputs against an explicit projection: coefficients times token columns.
        let mut r = rng(4);
        let rand_out: Vec<Tensor> = us.iter().map(|u| randn(u.x0.shape(), &mut r)).collect();
        let nt = w.config.n_semantic_tokens;
        let mut oracle = 0.0;
        for (u, x) in us.iter().zip(&rand_out) {
            let coef = w.coefficients(x).unwrap();
            let (e, l) = (w.config.embed_dim, x.frames());
            let mut se = 0.0;
            for i in 0..e {
                for f in 0..l {
                    let s: f64 = (0..nt).map(|k| w.tokens[k][i] * coef[(k, f)]).sum();
                    se += (s - u.c_sem.get2(i, f)).powi(2);
                }
            }
            oracle += se / (e * l) as f64;
        }
        assert!((content_utility(&w, &us, &rand_out).unwrap() - oracle / 3.0).abs() < 1e-12);
    }

    #[test]
    fn leakage_probe_reflects_strength() {
        let hi = leakage_probe(&world(0.5), 20, 20, 3).unwrap();
        let zero = leakage_probe(&world(0.0), 20, 20, 3).unwrap();
        assert!(hi > 1.0 / 16.0 + 0.1, "{hi}");
        assert!((zero - 1.0 / 16.0).abs() < 0.05, "{zero}");
    }

    #[test]
    fn operating_point_table() {
        let pts = operating_points(&DEFAULT_WEIGHTS);
        assert_eq!(pts.len(), 9);
        assert_eq!(operating_points(&[1.0]).len(), 5);
        let psi = vec![0.1; 8];
        assert_eq!(OperatingPoint::NullPsi.spec(&psi, 10, &[]).pseudo_speaker, Some(psi.clone()));
        assert_eq!(OperatingPoint::NullNull.spec(&psi, 10, &[]).pseudo_speaker, None);
        assert_eq!(OperatingPoint::Speaker(3.0).w_spk(), Some(3.0));
        assert!(OperatingPoint::ProsodyShift(1.0).spec(&psi, 10, &[0.5; 8]).prosody_shift.is_some());
        for p in pts {
            p.spec(&psi, 10, &[0.5; 8]).validate().unwrap();
        }
    }

    #[test]
    fn violation_counting() {
        assert_eq!(monotone_violations(&[1.0, 2.0, 3.0], 1.0), (0, 0.0));
        assert_eq!(monotone_violations(&[1.0, 3.0, 2.5, 4.0], 1.0), (1, 0.5));
        assert_eq!(monotone_violations(&[3.0, 2.0, 2.0], -1.0), (0, 0.0));
    }
}
