use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iplforge::synthcorpus::Manifest;

fn iplforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iplforge"))
        .args(args)
        .env_remove("IPLFORGE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = iplforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn usage_errors_exit_one() {
    let out = iplforge(&["train-tokenizer", "--size"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("usage: iplforge"));
    assert_eq!(iplforge(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(iplforge(&["--threads", "0", "select", "--manifest", "m", "--fraction", "1", "--out", "o"]).status.code(), Some(1));
    assert_eq!(iplforge(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let out = iplforge(&["select", "--manifest", "/nonexistent/m.tsv", "--fraction", "0.5", "--out", "/tmp/x.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/m.tsv"));
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "data.cfg", "count.UKR = 3\n");
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_iplforge"));
        cmd.env_remove("IPLFORGE_SEED");
        if let Some(v) = env {
            cmd.env("IPLFORGE_SEED", v);
        }
        let out_dir = dir.path().join(format!("d{}", extra.len() * 10 + env.map_or(0, |_| 1)));
        let out = cmd
            .args(extra)
            .args(["gen-data", "--config", s(&cfg), "--out", s(&out_dir)])
            .output()
            .unwrap();
        assert!(out.status.success());
        let err = String::from_utf8_lossy(&out.stderr).into_owned();
        (err, fs::read_to_string(out_dir.join("manifest.tsv")).unwrap())
    };
    let (err, default) = run(&[], None);
    assert!(err.starts_with("seed 0\n"), "{err}");
    let (err, from_env) = run(&[], Some("17"));
    assert!(err.starts_with("seed 17\n"));
    let (err, from_flag) = run(&["--seed", "17"], Some("4"));
    assert!(err.starts_with("seed 17\n"));
    assert_eq!(from_env, from_flag);
    assert_ne!(default, from_env);
}

/// The step-by-step workflow: data, tokenizer, training, decoding, selection,
/// evaluation and reporting.
#[test]
fn manual_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train_cfg = write(d, "train.data", "count.UKR = 12\ncount.RUS = 6\nreference_errors = 0.1, 0.05, 0.05\n");
    let dev_cfg = write(d, "dev.data", "count.UKR = 4\nsplit = dev\n");
    ok(&["--seed", "5", "gen-data", "--config", s(&train_cfg), "--out", s(&d.join("train"))]);
    ok(&["--seed", "5", "gen-data", "--config", s(&dev_cfg), "--out", s(&d.join("dev"))]);
    let train = d.join("train/reference.tsv");
    let dev = d.join("dev/manifest.tsv");
    assert_eq!(Manifest::read(&train).unwrap().len(), 18);

    let vocab = d.join("tok/v.vocab");
    ok(&["train-tokenizer", "--manifests", s(&train), s(&dev), "--size", "80", "--out", s(&vocab)]);
    let arch = write(d, "arch.cfg", "encoder_dim = 8\nlabel_dim = 8\njoiner_dim = 8\n");
    let tcfg = write(d, "t.cfg", "steps = 4\nbatch = 2\neval_every = 2\nseed = 9\n");
    let out = iplforge(&[
        "train", "--arch", s(&arch), "--train", s(&train), "--dev", s(&dev), "--vocab", s(&vocab), "--cfg", s(&tcfg), "--out",
        s(&d.join("m")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("seed 9\n"));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("best_step "));
    let ckpt = d.join("m/best.ckpt");
    assert!(ckpt.exists() && d.join("m/report.tsv").exists());

    let warm = ok(&[
        "train", "--arch", s(&arch), "--train", s(&train), "--dev", s(&dev), "--vocab", s(&vocab), "--cfg", s(&tcfg), "--out",
        s(&d.join("m2")), "--warm-start", s(&ckpt), "--mode", "encoder_only",
    ]);
    assert!(warm.starts_with("best_step "));

    let decoded = d.join("dec.tsv");
    ok(&["decode", "--ckpt", s(&ckpt), "--manifest", s(&dev), "--vocab", s(&vocab), "--stage-ref", "M", "--out", s(&decoded)]);
    let dm = Manifest::read(&decoded).unwrap();
    assert_eq!(dm.len(), 4);
    assert!(dm.records().iter().all(|r| r.certainty.is_some()));

    let all = d.join("all.tsv");
    ok(&["select", "--manifest", s(&decoded), "--fraction", "1.0", "--out", s(&all)]);
    let ids = |m: &Manifest| m.records().iter().map(|r| r.utt_id.clone()).collect::<BTreeSet<_>>();
    assert_eq!(ids(&Manifest::read(&all).unwrap()), ids(&dm));
    let half = d.join("half.tsv");
    ok(&["select", "--manifest", s(&decoded), "--fraction", "0.5", "--out", s(&half)]);
    assert_eq!(Manifest::read(&half).unwrap().len(), 2);

    let wer = ok(&["evaluate", "--ckpt", s(&ckpt), "--manifest", s(&dev), "--vocab", s(&vocab)]);
    let value = wer.trim().strip_prefix("wer ").expect("wer line");
    assert_eq!(value.split('.').nth(1).map(str::len), Some(6));
    assert!(value.parse::<f64>().unwrap() >= 0.0);
}

const TINY: &str = "\
seed = 2
utts_per_khr = 1
dev_utts = 3
test_utts = 3

tokenizer
name = A
languages = UKR, RUS, POL, CZE, SVK
size = 110

stage
stage_ref = S1
languages = UKR, RUS
weighting = NW
source = reference
tokenizer = A
warm_start = none
steps = 2
batch = 2
eval_every = 1

stage
stage_ref = S2
languages = UKR
weighting = BL
source = pseudo:S1
tokenizer = A
warm_start = S1
select = 0.5
steps = 2
batch = 2
eval_every = 1
";

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn curriculum_runs_report_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cur = write(dir.path(), "tiny.curriculum", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = ok(&["run-curriculum", "--file", s(&cur), "--out", s(&a)]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 3, "{report}");
    assert!(lines[1].starts_with("S1\t") && lines[2].starts_with("S2\t"));

    let again = ok(&["run-curriculum", "--file", s(&cur), "--out", s(&b)]);
    assert_eq!(report, again);
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.len() > 10);
    for f in &files {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }

    let test = a.join("data/test.tsv");
    let from_registry = ok(&["report", "--registry", s(&a), "--test", s(&test), "--reference-wer", "0.2"]);
    assert_eq!(from_registry.lines().count(), 3);

    let other = ok(&["--seed", "3", "run-curriculum", "--file", s(&cur), "--out", s(&dir.path().join("c"))]);
    assert_ne!(other, report);
}
