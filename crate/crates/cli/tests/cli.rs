use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use oodd_core::features::{read_feature_file, FeatureBatch};

fn oodd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodd"))
        .current_dir(dir)
        .env_remove("OODD_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A small synthetic dataset with its run configuration.
fn dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(oodd(
        dir.path(),
        &["synth", "--dim", "16", "--id-train", "400", "--id-test", "300", "--ood-test", "60", "--seed", "4"],
    ));
    dir
}

#[test]
fn run_writes_trace_batches_and_summary() {
    let dir = dataset();
    let stdout = ok(oodd(dir.path(), &["--out-dir", "out", "run", "--config", "run.toml", "--batch-size", "50"]));
    assert!(stdout.contains("synthetic-ood"));
    let trace = fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 361);
    let batches = fs::read_to_string(dir.path().join("out/batches.csv")).unwrap();
    assert_eq!(batches.lines().count(), 1 + 8);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["batch_size"], 50);
    assert_eq!(summary["config"]["k_id"], 10);
    assert_eq!(summary["stream"]["length"], 360);
    assert_eq!(summary["report"]["groups"][0]["name"], "far");
}

#[test]
fn run_is_reproducible() {
    let dir = dataset();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        ok(oodd(dir.path(), &["--out-dir", out, "run", "--config", "run.toml", "--seed", seed]));
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/trace.csv"), read("b/trace.csv"));
    assert_eq!(read("a/summary.json"), read("b/summary.json"));
    assert_ne!(read("a/trace.csv"), read("c/trace.csv"));
}

#[test]
fn eval_reads_a_trace() {
    let dir = dataset();
    ok(oodd(dir.path(), &["run", "--config", "run.toml"]));
    let stdout = ok(oodd(dir.path(), &["--out-dir", "e", "eval", "--trace", "trace.csv", "--group", "far=synthetic-ood", "--out", "m.json"]));
    assert!(stdout.contains("AUROC") && stdout.contains("[far]"), "{stdout}");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/m.json")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(m["overall"], summary["report"]["overall"]);
}

#[test]
fn dictionary_pipeline_and_scoring() {
    let dir = dataset();
    let files = ["--crops", "train_crops.oodf", "--confs", "train_confs.oodc", "--labels", "train_labels.oodl"];
    let mut args = vec!["build-id-dict", "--alpha", "50"];
    args.extend(files);
    ok(oodd(dir.path(), &args));
    assert_eq!(read_feature_file(dir.path().join("id_dict.oodf")).unwrap().len(), 200);

    let mut args = vec!["gen-outliers", "--strategy", "c-out", "--beta", "10"];
    args.extend(files);
    ok(oodd(dir.path(), &args));
    assert_eq!(read_feature_file(dir.path().join("outliers.oodf")).unwrap().len(), 40);

    ok(oodd(dir.path(), &["score", "--queries", "ood_test.oodf", "--id-dict", "id_dict.oodf", "--ood-keys", "outliers.oodf", "--k-id", "10"]));
    let scores = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    let mut lines = scores.lines();
    assert_eq!(lines.next(), Some("stream_position,s_in,s_out,s"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert_eq!(first[3], first[1] + first[2]);
    assert_eq!(scores.lines().count(), 61);

    let ext: String = std::iter::once("base\n".to_string()).chain((0..60).map(|i| format!("{i}\n"))).collect();
    fs::write(dir.path().join("ext.csv"), ext).unwrap();
    ok(oodd(dir.path(), &["score", "--queries", "ood_test.oodf", "--id-dict", "id_dict.oodf", "--ood-keys", "outliers.oodf", "--external", "ext.csv", "--out", "ext_scores.csv"]));
    let row: Vec<f64> = fs::read_to_string(dir.path().join("ext_scores.csv")).unwrap().lines().nth(3).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[3], 2.0 + row[2]);
}

#[test]
fn dump_dict_writes_queue_and_bank() {
    let dir = dataset();
    let stdout = ok(oodd(dir.path(), &["--out-dir", "dict", "dump-dict", "--config", "run.toml", "--queue-capacity", "16", "--mb-size", "3"]));
    assert!(stdout.contains("queue 16 of 16, bank 3"), "{stdout}");
    let queue: FeatureBatch = read_feature_file(dir.path().join("dict/queue.oodf")).unwrap();
    let bank = read_feature_file(dir.path().join("dict/bank.oodf")).unwrap();
    assert_eq!((queue.len(), bank.len()), (16, 3));
    let scores = fs::read_to_string(dir.path().join("dict/queue_scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("heap_index,seq,score"));
    assert_eq!(scores.lines().count(), 17);
}

#[test]
fn segments_from_flags() {
    let dir = dataset();
    ok(oodd(
        dir.path(),
        &["run", "--config", "run.toml", "--mode", "segmented", "--segment", "early:20:near=ood_test.oodf", "--segment", "late:30=ood_test.oodf"],
    ));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let sources: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).filter(|s| *s != "synthetic-id").collect();
    assert_eq!(sources.len(), 50);
    assert!(sources[..20].iter().all(|s| *s == "early") && sources[20..].iter().all(|s| *s == "late"));
}

#[test]
fn bench_reports_a_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(oodd(dir.path(), &["--threads", "1", "bench", "--n-keys", "300", "--d", "16", "--n-queries", "20", "--k", "5", "--out", "bench.csv"]));
    let mut lines = stdout.lines();
    assert!(lines.next().unwrap().starts_with("n_keys,d,"));
    assert!(lines.next().unwrap().starts_with("300,16,20,5,3,1,"));
    assert!(stdout.contains("speedup"));
    assert!(dir.path().join("bench.csv").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oodd(dir.path(), &["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(oodd(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(oodd(dir.path(), &["bench", "--k", "many"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_with_one_and_name_the_operation() {
    let dir = dataset();
    let out = oodd(dir.path(), &["eval", "--trace", "missing.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: eval:") && err.trim_end().lines().count() == 1, "{err}");

    let out = oodd(dir.path(), &["run", "--config", "run.toml", "--trace", "../escape.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().parent().unwrap().join("escape.csv").exists());

    fs::write(dir.path().join("bad.toml"), "[run]\nbatch = 3\n").unwrap();
    let out = oodd(dir.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: config:"));

    let out = oodd(dir.path(), &["run", "--config", "run.toml", "--init", "t-out"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(oodd(dir.path(), &["run", "--help"]));
    for flag in ["--config", "--k-id", "--k-ood", "--queue-capacity", "--mb-size", "--alpha", "--beta", "--batch-size", "--out-dir", "--threads"] {
        assert!(help.contains(flag), "{flag} missing");
    }
    assert!(help.contains("[default: 512]") && help.contains("[default: 50]"));
    let help = ok(oodd(dir.path(), &["build-id-dict", "--help"]));
    assert!(help.contains("[default: 50]"));
}
