use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffanon::commands::{self, GuidanceFlags};
use diffanon::config::RunConfig;
use diffanon::error::{CliError, Result};
use diffanon::selftest;
use diffanon_core::guidance::GuidanceMode;

/// Overrides the default output directory of every subcommand.
const OUT_DIR_ENV: &str = "DIFFANON_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "diffanon", version, about = "Conditional diffusion anonymizer on a synthetic codec world")]
struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world and dump utterances.
    GenWorld {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        n_utt: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoiser; writes checkpoints and loss.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Anonymize one evaluation utterance.
    Anonymize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Source speaker (an evaluation speaker; default the first).
        #[arg(long)]
        speaker: Option<usize>,
        /// Source utterance index.
        #[arg(long, default_value_t = 0)]
        utt: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output embedding file (raw f32).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep prosody guidance weights plus the extra operating points.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = diffanon_core::eval::DEFAULT_WEIGHTS)]
        weights: Vec<f64>,
        #[arg(long)]
        n_utt: Option<usize>,
        /// DDIM inference steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one operating point: prosody:W, null-psi, null-null, speaker:W or shift:W.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "prosody:1")]
        point: String,
        #[arg(long)]
        n_utt: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    ProsodyCfg,
    SpeakerCfg,
    Plain,
}

#[derive(Args, Debug)]
struct GuidanceArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Prosody guidance weight in [0, 2]; values outside [0, 1] extrapolate.
    #[arg(long)]
    w_pro: Option<f64>,
    /// Pseudo-speaker guidance weight (speaker-cfg mode).
    #[arg(long)]
    w_spk: Option<f64>,
    /// Plain mode: supply the source prosody condition.
    #[arg(long)]
    with_prosody: bool,
    /// Pool speaker to impersonate; drawn from the pool when omitted.
    #[arg(long)]
    pseudo_speaker: Option<usize>,
    /// Mean shift of the normalised prosody before conditioning.
    #[arg(long, allow_hyphen_values = true)]
    pitch_shift: Option<f64>,
    /// DDIM inference steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl From<GuidanceArgs> for GuidanceFlags {
    fn from(a: GuidanceArgs) -> Self {
        GuidanceFlags {
            mode: a.mode.map(|m| match m {
                ModeArg::ProsodyCfg => GuidanceMode::ProsodyCfg,
                ModeArg::SpeakerCfg => GuidanceMode::SpeakerCfg,
                ModeArg::Plain => GuidanceMode::Plain,
            }),
            w_pro: a.w_pro,
            w_spk: a.w_spk,
            with_prosody: a.with_prosody,
            pseudo_speaker: a.pseudo_speaker,
            pitch_shift: a.pitch_shift,
            steps: a.steps,
        }
    }
}

fn out_dir(flag: Option<PathBuf>, default: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(|d| Path::new(&d).join(default)))
        .unwrap_or_else(|| PathBuf::from("out").join(default))
}

fn run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.resolve(seed)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{line}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::GenWorld { config, seed, n_utt, out } => {
            let cfg = run_config(config.as_deref(), seed)?;
            let out = out_dir(out, "world");
            let entries = commands::gen_world(&cfg, n_utt, &out)?;
            println!("wrote {} utterances to {}", entries.len(), out.display());
        }
        Command::Train { config, seed, steps, resume, out } => {
            let mut cfg = run_config(config.as_deref(), seed)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let out = out_dir(out, "train");
            let done = commands::train(&cfg, &out, resume.as_deref(), |step, loss| eprintln!("step {step}: loss {loss:.6}"))?;
            match done.final_loss {
                Some(l) => println!("final loss {l:.6} after {} steps ({:.1}s); checkpoint {}", done.steps, done.seconds, done.checkpoint.display()),
                None => println!("no training steps run; checkpoint {}", done.checkpoint.display()),
            }
        }
        Command::Anonymize { checkpoint, guidance, speaker, utt, seed, out } => {
            let flags = GuidanceFlags::from(guidance);
            flags.check()?;
            if let Some(w) = flags.warning() {
                eprintln!("{w}");
            }
            let out = out.unwrap_or_else(|| out_dir(None, "anonymized").join(format!("utt{utt:05}.f32")));
            let report = commands::anonymize_one(&checkpoint, &flags, speaker, utt, seed, &out)?;
            print_json(&report)?;
        }
        Command::Sweep { checkpoint, weights, n_utt, steps, seed, out } => {
            let out = out_dir(out, "sweep");
            let report = commands::sweep(&checkpoint, &weights, (n_utt, steps), seed, &out)?;
            for r in &report.reports {
                println!(
                    "{:<18} w_pro={:<5} w_spk={:<5} eer={:6.2} eer_semi={:6.2} prosody_corr={:6.3} content_err={:.5}",
                    r.mode,
                    r.w_pro.map_or("-".into(), |w| w.to_string()),
                    r.w_spk.map_or("-".into(), |w| w.to_string()),
                    r.eer,
                    r.eer_semi,
                    r.prosody_corr,
                    r.content_err
                );
            }
            if let Some(t) = &report.trend {
                println!("spearman(w_pro, prosody_corr)={:.3} spearman(w_pro, eer)={:.3}", t.rho_w_prosody, t.rho_w_eer);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, point, n_utt, steps, seed, out } => {
            let point = commands::parse_point(&point)?;
            let report = commands::eval(&checkpoint, point, (n_utt, steps), seed, out.as_deref())?;
            print_json(&report)?;
        }
        Command::Selftest => {
            let results = selftest::run_all();
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} of {} self-checks failed", results.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
