//! Subcommand implementations, callable without the argument parser.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffanon_core::eval::{
    evaluate_point, leakage_probe, operating_points, tradeoff_trend, EvalConfig, EvalSet, MetricsReport, OperatingPoint, TradeoffTrend,
};
use diffanon_core::guidance::{anonymize, GuidanceMode, GuidanceSpec, PseudoSpeakerPool};
use diffanon_core::seed::labeled_rng;
use diffanon_core::{DenoiserModel, NoiseSchedule, Trainer, World};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dump::{self, IndexEntry};
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "model.danon";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// World, schedule and model described by a checkpoint.
pub struct Loaded {
    pub config: RunConfig,
    pub world: World,
    pub sched: NoiseSchedule,
    pub model: DenoiserModel,
}

pub fn load(checkpoint: &Path) -> Result<Loaded> {
    let ck = Checkpoint::load(checkpoint)?;
    Ok(Loaded { world: World::generate(ck.config.world)?, sched: ck.config.schedule.build()?, model: ck.model()?, config: ck.config })
}

#[derive(Debug, Serialize)]
pub struct WorldSummary<'a> {
    pub config: &'a diffanon_core::WorldConfig,
    pub speaker_vectors: &'a [Vec<f64>],
    pub contour_coefficients: &'a [[f64; diffanon_core::world::CONTOUR_BASIS]],
    pub max_speaker_cosine: f64,
    pub leakage_probe_accuracy: f64,
    pub chance: f64,
    pub utterances: usize,
}

pub fn gen_world(config: &RunConfig, n_utt: usize, out: &Path) -> Result<Vec<IndexEntry>> {
    let world = World::generate(config.world)?;
    let entries = dump::dump_world(&world, n_utt, config.seed, out)?;
    let summary = WorldSummary {
        config: &world.config,
        speaker_vectors: &world.bank.vectors,
        contour_coefficients: &world.bank.contours,
        max_speaker_cosine: world.bank.max_cosine(),
        leakage_probe_accuracy: leakage_probe(&world, 20, 20, config.seed)?,
        chance: 1.0 / world.config.n_speakers as f64,
        utterances: n_utt,
    };
    write_json(&out.join("world.json"), &summary)?;
    Ok(entries)
}

pub struct TrainOutcome {
    pub final_loss: Option<f64>,
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Trains from scratch (or from `resume`), writing periodic checkpoints,
/// the final checkpoint and the loss log into `out`.
pub fn train(config: &RunConfig, out: &Path, resume: Option<&Path>, mut progress: impl FnMut(u64, f64)) -> Result<TrainOutcome> {
    create_dir(out)?;
    let world = World::generate(config.world)?;
    let sched = config.schedule.build()?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.world != config.world || ck.config.backbone != config.backbone || ck.config.schedule != config.schedule {
                return Err(CliError::Usage(format!("{} was trained under a different world, backbone or schedule", p.display())));
            }
            let mut t = ck.trainer()?;
            t.config.steps = config.train.steps;
            t.config.checkpoint_every = config.train.checkpoint_every;
            t
        }
        None => {
            let model = DenoiserModel::new(config.backbone, &mut labeled_rng(config.seed, "init", 0))?;
            Trainer::new(config.train, model)?
        }
    };
    let started = Instant::now();
    let mut log_file = std::fs::File::create(out.join(LOSS_FILE)).map_err(|e| CliError::io(out.join(LOSS_FILE), e))?;
    let mut logged = 0;
    let mut flush_log = |t: &Trainer, file: &mut std::fs::File| -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if logged == 0 {
            w.write_record(["step", "loss"])?;
        }
        for r in &t.log[logged..] {
            w.serialize((r.step, r.loss))?;
        }
        logged = t.log.len();
        file.write_all(&w.into_inner().map_err(|e| e.into_error())?)
    };
    trainer.run(&world, &sched, |t| {
        let path = out.join(format!("checkpoint-{:07}.danon", t.step));
        Checkpoint::from_trainer(config, t).save(&path).map_err(|e| diffanon_core::Error::Checkpoint(e.to_string()))?;
        flush_log(t, &mut log_file).map_err(|e| diffanon_core::Error::Checkpoint(e.to_string()))?;
        progress(t.step, t.log.last().map_or(f64::NAN, |r| r.loss));
        Ok(())
    })?;
    flush_log(&trainer, &mut log_file).map_err(|e| CliError::io(out.join(LOSS_FILE), e))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::from_trainer(config, &trainer).save(&checkpoint)?;
    Ok(TrainOutcome { final_loss: trainer.log.last().map(|r| r.loss), steps: trainer.step, checkpoint, seconds: started.elapsed().as_secs_f64() })
}

/// Inference flags as given on the command line, before validation.
#[derive(Clone, Debug, Default)]
pub struct GuidanceFlags {
    pub mode: Option<GuidanceMode>,
    pub w_pro: Option<f64>,
    pub w_spk: Option<f64>,
    pub with_prosody: bool,
    pub pseudo_speaker: Option<usize>,
    /// Mean shift of the normalised prosody trajectory.
    pub pitch_shift: Option<f64>,
    pub steps: Option<usize>,
}

impl GuidanceFlags {
    /// Rejects flag combinations that contradict the chosen mode.
    pub fn check(&self) -> Result<GuidanceMode> {
        let mode = self.mode.unwrap_or(GuidanceMode::ProsodyCfg);
        let conflict = |flag: &str| Err(CliError::Usage(format!("{flag} conflicts with --mode {}", mode.as_str())));
        match mode {
            GuidanceMode::ProsodyCfg => {
                if self.w_spk.is_some() {
                    return conflict("--w-spk");
                }
                if self.with_prosody {
                    return conflict("--with-prosody");
                }
            }
            GuidanceMode::SpeakerCfg => {
                if self.w_pro.is_some() {
                    return conflict("--w-pro");
                }
                if self.with_prosody {
                    return conflict("--with-prosody");
                }
                if self.pitch_shift.is_some() {
                    return conflict("--pitch-shift");
                }
            }
            GuidanceMode::Plain => {
                if self.w_pro.is_some() {
                    return conflict("--w-pro");
                }
                if self.w_spk.is_some() {
                    return conflict("--w-spk");
                }
                if self.pitch_shift.is_some() && !self.with_prosody {
                    return Err(CliError::Usage("--pitch-shift needs --with-prosody in plain mode".into()));
                }
            }
        }
        Ok(mode)
    }

    /// Warning for prosody weights outside the interpolating range.
    pub fn warning(&self) -> Option<String> {
        let w = self.w_pro?;
        (!(0.0..=1.0).contains(&w)).then(|| format!("warning: --w-pro {w} lies outside [0, 1]; the prosody guidance extrapolates"))
    }

    /// Builds the spec; without `--pseudo-speaker` modes that need one draw it from the pool.
    pub fn spec(&self, pool: &PseudoSpeakerPool, world: &World, seed: u64, default_steps: usize) -> Result<(GuidanceSpec, Option<usize>)> {
        let mode = self.check()?;
        let n = self.steps.unwrap_or(default_steps);
        let psi = match self.pseudo_speaker {
            Some(k) => {
                let e = pool.get(k).ok_or_else(|| {
                    let labels: Vec<usize> = pool.entries().iter().map(|e| e.0).collect();
                    CliError::Usage(format!("--pseudo-speaker {k} is not in the pool {labels:?}"))
                })?;
                Some((k, e.to_vec()))
            }
            None if mode != GuidanceMode::Plain => {
                let (k, e) = pool.sample(&mut labeled_rng(seed, "pseudo", 0))?;
                Some((k, e.to_vec()))
            }
            None => None,
        };
        let label = psi.as_ref().map(|p| p.0);
        let psi = psi.map(|p| p.1);
        let mut spec = match mode {
            GuidanceMode::ProsodyCfg => GuidanceSpec::prosody_cfg(self.w_pro.unwrap_or(1.0), psi.expect("drawn above"), n),
            GuidanceMode::SpeakerCfg => GuidanceSpec::speaker_cfg(self.w_spk.unwrap_or(0.0), psi.expect("drawn above"), n),
            GuidanceMode::Plain => GuidanceSpec::plain(self.with_prosody, psi, n),
        };
        if let Some(d) = self.pitch_shift {
            spec = spec.with_prosody_shift(world.prosody_shift_vector(d));
        }
        spec.validate()?;
        Ok((spec, label))
    }
}

#[derive(Debug, Serialize)]
pub struct AnonymizeReport {
    pub mode: &'static str,
    pub w_pro: f64,
    pub w_spk: f64,
    pub with_prosody: bool,
    pub pseudo_speaker: Option<usize>,
    pub pitch_shift: Option<f64>,
    pub source_speaker: usize,
    pub source_utt: u64,
    pub n_infer: usize,
    pub seed: u64,
    pub output: String,
    pub prosody_corr: Option<f64>,
    pub content_err: f64,
}

/// Anonymizes one evaluation-speaker utterance and writes it in the dump format.
pub fn anonymize_one(checkpoint: &Path, flags: &GuidanceFlags, speaker: Option<usize>, utt: u64, seed: u64, out: &Path) -> Result<AnonymizeReport> {
    let l = load(checkpoint)?;
    let speaker = speaker.unwrap_or(l.world.eval_speakers().start);
    if !l.world.eval_speakers().contains(&speaker) {
        return Err(CliError::Usage(format!("--speaker must be an evaluation speaker in {:?}", l.world.eval_speakers())));
    }
    let pool = PseudoSpeakerPool::from_world(&l.world, l.config.eval.pool_utts, &mut labeled_rng(seed, "pool", 0))?;
    let (spec, label) = flags.spec(&pool, &l.world, seed, l.config.eval.n_infer)?;
    let source = l.world.generate_utterance(speaker, &mut labeled_rng(seed, "source", utt))?;
    let x = anonymize(&l.model, &l.sched, &spec, &source, &mut labeled_rng(seed, "sampler", utt))?;

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    dump::write_f32(out, &x)?;
    let sources = std::slice::from_ref(&source);
    let anon = std::slice::from_ref(&x);
    Ok(AnonymizeReport {
        mode: spec.mode.as_str(),
        w_pro: spec.w_pro,
        w_spk: spec.w_spk,
        with_prosody: spec.with_prosody,
        pseudo_speaker: label,
        pitch_shift: flags.pitch_shift,
        source_speaker: speaker,
        source_utt: utt,
        n_infer: spec.n_infer_steps,
        seed,
        output: out.display().to_string(),
        prosody_corr: diffanon_core::eval::prosody_utility(&l.world, sources, anon).ok().map(|p| p.mean),
        content_err: diffanon_core::eval::content_utility(&l.world, sources, anon)?,
    })
}

/// One metrics CSV row.
#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    w_pro: Option<f64>,
    w_spk: Option<f64>,
    mode: &'a str,
    eer: f64,
    eer_semi: f64,
    prosody_corr: f64,
    content_err: f64,
    n_utt: usize,
    seed: u64,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub reports: Vec<MetricsReport>,
    pub trend: Option<TradeoffTrend>,
    pub leakage_probe_accuracy: f64,
    pub chance: f64,
}

pub fn eval_config(base: &EvalConfig, n_utt: Option<usize>, steps: Option<usize>, seed: u64) -> EvalConfig {
    EvalConfig { n_utt: n_utt.unwrap_or(base.n_utt), n_infer: steps.unwrap_or(base.n_infer), seed, ..*base }
}

/// Evaluates `points` over one shared evaluation set, in parallel across points.
pub fn evaluate_points(l: &Loaded, points: &[OperatingPoint], cfg: &EvalConfig) -> Result<Vec<MetricsReport>> {
    let set = EvalSet::build(&l.world, cfg)?;
    let reports: Vec<_> = points.par_iter().map(|&p| evaluate_point(&l.model, &l.world, &l.sched, &set, p, cfg)).collect();
    Ok(reports.into_iter().collect::<Result<Vec<_>, _>>()?)
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    for r in reports {
        w.serialize(MetricsRow {
            w_pro: r.w_pro,
            w_spk: r.w_spk,
            mode: &r.mode,
            eer: r.eer,
            eer_semi: r.eer_semi,
            prosody_corr: r.prosody_corr,
            content_err: r.content_err,
            n_utt: r.n_utt,
            seed: r.seed,
        })
        .map_err(|e| CliError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `(prosody_corr, eer)` of the prosody-guidance rows, by decreasing weight.
pub fn write_tradeoff_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut rows: Vec<&MetricsReport> = reports.iter().filter(|r| r.mode == GuidanceMode::ProsodyCfg.as_str()).collect();
    rows.sort_by(|a, b| b.w_pro.unwrap_or(0.0).total_cmp(&a.w_pro.unwrap_or(0.0)));
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    w.write_record(["prosody_corr", "eer"]).map_err(|e| CliError::format(path, e.to_string()))?;
    for r in rows {
        w.serialize((r.prosody_corr, r.eer)).map_err(|e| CliError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn sweep(checkpoint: &Path, weights: &[f64], cfg_override: (Option<usize>, Option<usize>), seed: u64, out: &Path) -> Result<SweepReport> {
    if weights.is_empty() {
        return Err(CliError::Usage("--weights needs at least one value".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=diffanon_core::guidance::MAX_W_PRO).contains(*w)) {
        return Err(CliError::Usage(format!("weight {w} outside [0, {}]", diffanon_core::guidance::MAX_W_PRO)));
    }
    let l = load(checkpoint)?;
    let cfg = eval_config(&l.config.eval, cfg_override.0, cfg_override.1, seed);
    let reports = evaluate_points(&l, &operating_points(weights), &cfg)?;
    create_dir(out)?;
    write_metrics_csv(&out.join(METRICS_FILE), &reports)?;
    write_tradeoff_csv(&out.join(TRADEOFF_FILE), &reports)?;
    let report = SweepReport {
        trend: tradeoff_trend(&reports).ok(),
        leakage_probe_accuracy: leakage_probe(&l.world, 20, 20, seed)?,
        chance: 1.0 / l.world.config.n_speakers as f64,
        reports,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Parses an operating point: `prosody:W`, `null-psi`, `null-null`, `speaker:W` or `shift:W`.
pub fn parse_point(s: &str) -> Result<OperatingPoint> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let weight = |a: Option<&str>| -> Result<f64> {
        a.ok_or_else(|| CliError::Usage(format!("operating point {s} needs a weight, e.g. {name}:1")))?
            .parse::<f64>()
            .map_err(|e| CliError::Usage(format!("bad weight in {s}: {e}")))
    };
    Ok(match (name, arg) {
        ("prosody", a) => OperatingPoint::Prosody(weight(a)?),
        ("speaker", a) => OperatingPoint::Speaker(weight(a)?),
        ("shift", a) => OperatingPoint::ProsodyShift(weight(a)?),
        ("null-psi", None) => OperatingPoint::NullPsi,
        ("null-null", None) => OperatingPoint::NullNull,
        _ => return Err(CliError::Usage(format!("unknown operating point {s}"))),
    })
}

pub fn eval(checkpoint: &Path, point: OperatingPoint, cfg_override: (Option<usize>, Option<usize>), seed: u64, out: Option<&Path>) -> Result<MetricsReport> {
    point.spec(&[0.0], 1, &[0.0]).validate()?;
    let l = load(checkpoint)?;
    let cfg = eval_config(&l.config.eval, cfg_override.0, cfg_override.1, seed);
    let report = evaluate_points(&l, &[point], &cfg)?.remove(0);
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_json(path, &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_conflicts() {
        let f = |mode, w_pro, w_spk, with_prosody| GuidanceFlags { mode: Some(mode), w_pro, w_spk, with_prosody, ..Default::default() };
        assert!(f(GuidanceMode::SpeakerCfg, Some(0.5), None, false).check().is_err());
        assert!(f(GuidanceMode::ProsodyCfg, None, Some(3.0), false).check().is_err());
        assert!(f(GuidanceMode::Plain, Some(1.0), None, true).check().is_err());
        assert!(f(GuidanceMode::ProsodyCfg, None, None, true).check().is_err());
        assert!(f(GuidanceMode::Plain, None, None, true).check().is_ok());
        assert!(f(GuidanceMode::SpeakerCfg, None, Some(3.0), false).check().is_ok());
        let shift_plain = GuidanceFlags { mode: Some(GuidanceMode::Plain), pitch_shift: Some(1.0), ..Default::default() };
        assert!(shift_plain.check().is_err());
    }

    #[test]
    fn extrapolation_warning() {
        let w = |v| GuidanceFlags { w_pro: Some(v), ..Default::default() }.warning();
        assert!(w(1.5).is_some());
        assert!(w(0.5).is_none());
        assert!(GuidanceFlags::default().warning().is_none());
    }

    #[test]
    fn point_parsing() {
        assert_eq!(parse_point("prosody:0.5").unwrap(), OperatingPoint::Prosody(0.5));
        assert_eq!(parse_point("null-psi").unwrap(), OperatingPoint::NullPsi);
        assert_eq!(parse_point("speaker:3").unwrap(), OperatingPoint::Speaker(3.0));
        assert!(parse_point("prosody").is_err());
        assert!(parse_point("null-psi:1").is_err());
        assert!(parse_point("bogus").is_err());
    }
}
