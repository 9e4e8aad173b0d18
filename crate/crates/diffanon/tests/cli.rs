use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SHORT: &str = "seed = 3\n[train]\nsteps = 12\ncheckpoint_every = 6\n[world]\nframes = 16\n";

fn diffanon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffanon")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One short training run shared by every test that needs a checkpoint.
fn checkpoint() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("short.toml");
        std::fs::write(&cfg, SHORT).unwrap();
        let out = dir.path().join("train");
        let o = diffanon(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let ck = out.join("model.danon");
        (dir, ck)
    })
    .1
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(diffanon(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(diffanon(&["train", "--steps", "many"]).status.code(), Some(1));
    assert_eq!(diffanon(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1\n").unwrap();
    assert_eq!(diffanon(&["train", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(1));
    std::fs::write(&bad, "[train]\nlr = -1\n").unwrap();
    assert_eq!(diffanon(&["train", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(1));
}

#[test]
fn unreadable_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.danon");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = diffanon(&["anonymize", "--checkpoint", s(&junk), "--out", s(&dir.path().join("a.f32"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
}

#[test]
fn conflicting_guidance_flags_are_rejected() {
    let ck = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.f32");
    for args in [
        vec!["--mode", "speaker-cfg", "--w-pro", "0.5"],
        vec!["--mode", "prosody-cfg", "--w-spk", "2"],
        vec!["--mode", "plain", "--w-pro", "1"],
        vec!["--with-prosody"],
        vec!["--mode", "plain", "--pitch-shift", "1"],
        vec!["--w-pro", "2.5"],
        vec!["--pseudo-speaker", "15"],
    ] {
        let mut full = vec!["anonymize", "--checkpoint", s(ck), "--out", s(&out)];
        full.extend(&args);
        let o = diffanon(&full);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.exists());
}

#[test]
fn extrapolating_weight_warns_but_runs() {
    let ck = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.f32");
    let o = diffanon(&["anonymize", "--checkpoint", s(ck), "--w-pro", "1.5", "--steps", "4", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["w_pro"], 1.5);
    assert_eq!(report["mode"], "prosody-cfg");
    assert!(out.exists());
}

#[test]
fn unit_weight_matches_plain_conditional_run() {
    let ck = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("cfg.f32"), dir.path().join("plain.f32"), dir.path().join("w0.f32"));
    let common = ["--checkpoint", s(ck), "--steps", "6", "--pseudo-speaker", "2", "--seed", "4"];
    let run = |extra: &[&str]| {
        let mut args = vec!["anonymize"];
        args.extend(common);
        args.extend(extra);
        let o = diffanon(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["--w-pro", "1", "--out", s(&a)]);
    run(&["--mode", "plain", "--with-prosody", "--out", s(&b)]);
    run(&["--w-pro", "0", "--out", s(&c)]);
    let (fa, fb, fc) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

#[test]
fn repeated_anonymize_is_byte_identical() {
    let ck = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = diffanon(&["anonymize", "--checkpoint", s(ck), "--mode", "speaker-cfg", "--w-spk", "3", "--steps", "5", "--seed", "9", "--out", s(&out)]);
        assert!(o.status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("x.f32"), run("y.f32"));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let ck = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let o = diffanon(&["sweep", "--checkpoint", s(ck), "--n-utt", "6", "--steps", "3", "--out", s(&full)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(full.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("w_pro,w_spk,mode,eer,eer_semi,prosody_corr,content_err,n_utt,seed"));
    assert_eq!(lines.count(), 9);
    let tradeoff = std::fs::read_to_string(full.join("tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().next(), Some("prosody_corr,eer"));
    assert_eq!(tradeoff.lines().count(), 6);

    let two = dir.path().join("two");
    let o = diffanon(&["sweep", "--checkpoint", s(ck), "--weights", "1,0", "--n-utt", "6", "--steps", "3", "--out", s(&two)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(two.join("metrics.csv")).unwrap().lines().count(), 1 + 6);

    assert_eq!(diffanon(&["sweep", "--checkpoint", s(ck), "--weights", "3", "--out", s(&two)]).status.code(), Some(1));
}

#[test]
fn eval_reports_one_point_as_json() {
    let ck = checkpoint();
    let o = diffanon(&["eval", "--checkpoint", s(ck), "--point", "null-null", "--n-utt", "6", "--steps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["mode"], "null-null");
    assert!(r["eer"].as_f64().unwrap() >= 0.0);
    assert_eq!(diffanon(&["eval", "--checkpoint", s(ck), "--point", "prosody:7"]).status.code(), Some(1));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    std::fs::write(&cfg, SHORT).unwrap();
    let full = dir.path().join("full");
    assert!(diffanon(&["train", "--config", s(&cfg), "--out", s(&full)]).status.success());
    let part = dir.path().join("part");
    assert!(diffanon(&["train", "--config", s(&cfg), "--steps", "6", "--out", s(&part)]).status.success());
    let resumed = dir.path().join("resumed");
    let o = diffanon(&["train", "--config", s(&cfg), "--resume", s(&part.join("model.danon")), "--out", s(&resumed)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(full.join("model.danon")).unwrap(), std::fs::read(resumed.join("model.danon")).unwrap());
}

#[test]
fn gen_world_writes_index_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffanon(&["gen-world", "--seed", "2", "--n-utt", "4", "--out", s(dir.path())]);
    assert!(o.status.success());
    let index = std::fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(index.lines().next().unwrap()).unwrap();
    assert_eq!(first["shape"], serde_json::json!([32, 64]));
    let bytes = std::fs::metadata(dir.path().join("utt00000.f32")).unwrap().len();
    assert_eq!(bytes, 4 * 32 * 64);
    assert!(dir.path().join("world.json").exists());
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_diffanon"))
        .args(["gen-world", "--n-utt", "1"])
        .env("DIFFANON_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("world/index.jsonl").exists());
}
