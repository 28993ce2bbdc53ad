use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn corpus() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/corpus.txt"))
}

fn tacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacl")).args(args).output().expect("run tacl")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 16] = [
    "--set", "d_model=16", "--set", "n_layers=1", "--set", "n_heads=2", "--set", "d_ff=32", "--set", "max_len=32",
    "--set", "batch_size=4", "--set", "steps=6", "--set", "lr_peak=1e-3",
];

fn build_vocab(dir: &Path) -> PathBuf {
    let vocab = dir.join("vocab.txt");
    let o = tacl(&["build-vocab", "--corpus", s(&corpus()), "--size", "200", "--out", s(&vocab)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    vocab
}

fn pretrain(dir: &Path, vocab: &Path) -> PathBuf {
    let out = dir.join("base");
    let corpus = corpus();
    let mut args = vec!["pretrain-base", "--corpus", s(&corpus), "--vocab", s(vocab), "--out", s(&out)];
    args.extend(TINY);
    let o = tacl(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["seed"], 13);
    out
}

#[test]
fn help_and_version_exit_zero() {
    assert!(tacl(&["--help"]).status.success());
    assert!(tacl(&["--version"]).status.success());
    assert!(tacl(&["train-tacl", "--help"]).status.success());
}

#[test]
fn usage_errors_exit_two_with_json() {
    let o = tacl(&["train-tacl", "--base", "b", "--corpus", "c", "--recipe", "bert-large", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");
    let o = tacl(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tacl(&["gradcheck", "--op", "conv2d"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_list_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = build_vocab(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "steps = 0\nunknown_key = 1\n").unwrap();
    let out = dir.path().join("o");
    let o = tacl(&[
        "pretrain-base", "--corpus", s(&corpus()), "--vocab", s(&vocab), "--config", s(&cfg), "--set", "tau=-1", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    let keys: Vec<&str> = e["keys"].as_array().unwrap().iter().map(|k| k.as_str().unwrap()).collect();
    for k in ["steps", "unknown_key", "tau"] {
        assert!(keys.contains(&k), "{k} not in {keys:?}");
    }
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tacl(&["build-vocab", "--corpus", s(&dir.path().join("absent.txt")), "--size", "50", "--out", s(&dir.path().join("v"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "io");
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = build_vocab(dir.path());
    let corpus_before = fs::read(corpus()).unwrap();
    let vocab_before = fs::read(&vocab).unwrap();
    let base = pretrain(dir.path(), &vocab);
    assert!(base.join("config.resolved.toml").exists());
    assert!(base.join("command.json").exists());
    let base_ckpt = base.join("final");

    let mut reports = Vec::new();
    for recipe in ["baseline-mt", "tacl", "model-1", "model-2"] {
        let out = dir.path().join(recipe);
        let o = tacl(&[
            "train-tacl", "--base", s(&base_ckpt), "--corpus", s(&corpus()), "--recipe", recipe, "--out", s(&out), "--set", "steps=4",
            "--set", "batch_size=4",
        ]);
        assert!(o.status.success(), "{recipe}: {}", String::from_utf8_lossy(&o.stderr));
        let summary = stdout_json(&o);
        assert_eq!(summary["recipe"], recipe);
        assert_eq!(summary["steps"], 4);
        let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
        assert!(resolved.contains("d_model = 16"), "{resolved}");
        assert_eq!(out.join("teacher.bin").exists(), recipe == "tacl" || recipe == "model-2");
        assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 4);

        let report = dir.path().join(format!("{recipe}.json"));
        let o = tacl(&["analyze", "--ckpt", s(&out.join("final")), "--corpus", s(&corpus()), "--sample", "30", "--out", s(&report)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout_json(&o)["seed"], 13);
        reports.push(report);
    }
    let o = tacl(&["compare", "--a", s(&reports[0]), "--b", s(&reports[1])]);
    assert!(o.status.success());
    let c = stdout_json(&o);
    assert_eq!(c["layers"].as_array().unwrap().len(), 2);

    let prefix = dir.path().join("heat");
    let o = tacl(&["heatmap", "--ckpt", s(&dir.path().join("tacl/final")), "--text", "The clever lecture explained the lesson .", "--layer", "1", "--out", s(&prefix)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("heat.csv").exists());
    assert!(fs::read(dir.path().join("heat.pgm")).unwrap().starts_with(b"P5\n"));
    let o = tacl(&["heatmap", "--ckpt", s(&dir.path().join("tacl/final")), "--text", "x", "--layer", "9", "--out", s(&prefix)]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(fs::read(corpus()).unwrap(), corpus_before);
    assert_eq!(fs::read(&vocab).unwrap(), vocab_before);
}

#[test]
fn reruns_and_resume_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = build_vocab(dir.path());
    let base = pretrain(dir.path(), &vocab).join("final");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let corpus = corpus();
        let mut args = vec![
            "train-tacl", "--base", s(&base), "--corpus", s(&corpus), "--recipe", "tacl", "--out", s(&out), "--set", "steps=8", "--set",
            "batch_size=4", "--set", "checkpoint_every=3", "--seed", "5",
        ];
        args.extend_from_slice(extra);
        let o = tacl(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout_json(&o)["seed"], 5);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    assert_eq!(fs::read(a.join("final.bin")).unwrap(), fs::read(b.join("final.bin")).unwrap());

    // Resume `b` from its step-6 checkpoint.
    let ckpt = b.join("ckpt-000006");
    let resumed = run("b", &["--resume", s(&ckpt)]);
    assert_eq!(fs::read(a.join("final.bin")).unwrap(), fs::read(resumed.join("final.bin")).unwrap());
    let strip = |p: &Path| -> Vec<Value> {
        fs::read_to_string(p.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("seconds");
                v
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&resumed));
}

#[test]
fn extents_must_match_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = build_vocab(dir.path());
    let base = pretrain(dir.path(), &vocab).join("final");
    let o = tacl(&[
        "train-tacl", "--base", s(&base), "--corpus", s(&corpus()), "--recipe", "tacl", "--out", s(&dir.path().join("x")), "--set",
        "d_model=32", "--set", "max_len=64",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let keys = stderr_json(&o)["keys"].clone();
    assert!(keys.as_array().unwrap().iter().any(|k| k == "d_model"));
    assert!(keys.as_array().unwrap().iter().any(|k| k == "max_len"));
}

#[test]
fn verification_commands() {
    let o = tacl(&["gradcheck", "--op", "layer_norm", "--instances", "5"]);
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["passed"], true);
    assert_eq!(v["seed"], 13);
    let o = tacl(&["gradcheck", "--full-model", "--instances", "2", "--seed", "4"]);
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["checks"][0]["name"], "full_model");
    let o = tacl(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let v = stdout_json(&o);
    assert!(v["results"].as_array().unwrap().iter().all(|r| r["passed"] == true));
}
