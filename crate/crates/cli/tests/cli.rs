use std::path::Path;
use std::process::{Command, Output};

fn biolip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biolip")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = biolip(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, out: &str, seed: u64, n: usize) {
    std::fs::write(dir.join(format!("{out}.toml")), format!("n_frames = 40\nseed = {seed}\n")).unwrap();
    let n = n.to_string();
    ok(dir, &["synth", "--config", &format!("{out}.toml"), "--out", out, "--n-real", &n, "--n-fake", &n]);
}

fn manifests(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "train", 1, 4);
    synth(dir, "val", 2, 2);
    std::fs::write(dir.join("run.toml"), "[train]\nepochs = 2\npatience = 2\nbatch_size = 16\n").unwrap();
    ok(dir, &["train", "--train", "train", "--val", "val", "--config", "run.toml", "--out", "model/ckpt.bin"]);
    ok(dir, &["eval", "--ckpt", "model/ckpt.bin", "--data", "val", "--report", "model/auc.csv", "--scores", "model/scores.csv"]);

    let report = std::fs::read_to_string(dir.join("model/auc.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("scope,n_videos,auc"));
    let overall: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(overall[..2], ["overall", "4"]);
    assert!((0.0..=1.0).contains(&overall[2].parse::<f64>().unwrap()));
    let history = std::fs::read_to_string(dir.join("model/ckpt.bin.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(dir.join("model/scores.csv")).unwrap().lines().count(), 5);

    let runs = manifests(&dir.join("model/runs.jsonl"));
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["command"], "train");
    assert_eq!(runs[0]["config"]["train"]["epochs"], 2);
    assert_eq!(runs[0]["seed"], 42);
    assert_eq!(runs[1]["command"], "eval");
    assert_eq!(manifests(&dir.join("runs.jsonl")).len(), 2);
}

#[test]
fn synth_is_reproducible_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "a", 9, 2);
    let run = &manifests(&dir.join("runs.jsonl"))[0];
    let cfg: toml::Value = serde_json::from_value(run["config"]["synth"].clone()).unwrap();
    std::fs::write(dir.join("echo.toml"), toml::to_string(&cfg).unwrap()).unwrap();
    let n = run["config"]["n_real"].to_string();
    ok(dir, &["synth", "--config", "echo.toml", "--out", "b", "--n-real", &n, "--n-fake", &n]);
    for entry in std::fs::read_dir(dir.join("a")).unwrap() {
        let path = entry.unwrap().path();
        let twin = dir.join("b").join(path.file_name().unwrap());
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(twin).unwrap());
    }
}

#[test]
fn perturb_records_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "clean", 3, 1);
    ok(dir, &["perturb", "--kind", "noise", "--sigma", "0.005", "--axes", "y", "--in", "clean", "--out", "noisy", "--seed", "7"]);
    let text = std::fs::read_to_string(dir.join("noisy/real_00000.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["perturb"]["kind"], "noise");
    assert_eq!(header["perturb"]["sigma"], 0.005);
    assert_eq!(header["perturb"]["axes"], serde_json::json!(["y"]));
    assert_eq!(header["perturb"]["seed"], 7);
    assert_eq!(header["label"], 0);
    let clean = std::fs::read_to_string(dir.join("clean/real_00000.jsonl")).unwrap();
    assert_eq!(clean.lines().count(), text.lines().count());
    assert_ne!(clean, text);
}

#[test]
fn stats_extract_and_bench_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "data", 4, 3);
    ok(dir, &["stats", "--data", "data", "--report", "out/stats.csv", "--psd", "out/psd.csv"]);
    let stats = std::fs::read_to_string(dir.join("out/stats.csv")).unwrap();
    assert!(stats.starts_with("name,n_a,n_b,mean_a"));
    assert_eq!(stats.lines().count(), 9);
    let psd = std::fs::read_to_string(dir.join("out/psd.csv")).unwrap();
    assert_eq!(psd.lines().next(), Some("frequency_hz,power_real,power_fake"));

    ok(dir, &["extract", "--in", "data", "--cache", "out/features.bin"]);
    assert_eq!(&std::fs::read(dir.join("out/features.bin")).unwrap()[..8], b"BLIPFEAT");

    std::fs::write(dir.join("run.toml"), "[train]\nepochs = 1\npatience = 1\nbatch_size = 16\n").unwrap();
    ok(dir, &["train", "--train", "data", "--val", "data", "--config", "run.toml", "--out", "out/ckpt.bin"]);
    let bench = ok(dir, &["bench", "--ckpt", "out/ckpt.bin", "--warmup", "2", "--iters", "20", "--report", "out/bench.csv"]);
    assert!(bench.starts_with("mode,iters,mean_ms,p50_ms,p99_ms\nmodel,20,"));
    assert_eq!(manifests(&dir.join("out/runs.jsonl")).len(), 4);
}

#[test]
fn usage_and_domain_errors_have_distinct_status() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let unknown = biolip(dir, &["train", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(biolip(dir, &[]).status.code(), Some(2));
    assert_eq!(biolip(dir, &["--help"]).status.code(), Some(0));

    let missing = biolip(dir, &["eval", "--ckpt", "nope.bin", "--data", ".", "--report", "r.csv"]);
    assert_eq!(missing.status.code(), Some(1));
    std::fs::write(dir.join("bad.toml"), "[train]\nlr0 = -1\n").unwrap();
    synth(dir, "d", 5, 1);
    let bad = biolip(dir, &["train", "--train", "d", "--val", "d", "--config", "bad.toml", "--out", "m.bin"]);
    assert_eq!(bad.status.code(), Some(1));
    let typo = biolip(dir, &["synth", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(typo.status.code(), Some(1));
}
