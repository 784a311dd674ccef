use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
rnn_size=8
word_size=4
attn_size=8
feat_size=4
epochs_stage1=2
epochs_stage2=1
retrain_epochs=1
min_freq=2
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsecap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(dir.path(), &["gen-data", "--seed", "3", "--scenes", "240", "--out", "data.jsonl"]);
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn dense_report_has_no_sparsity() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train", "--config", "tiny.cfg", "--data", "data.jsonl", "--method", "dense", "--out", "dense"]);
    let out = ok(d, &["report", "--model", "dense/final.gckp", "--out", "layers.csv"]);
    assert!(stdout(&out).contains("sparsity 0.0000 CR 1.00x"), "{}", stdout(&out));
    let csv = fs::read_to_string(d.join("layers.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("layer,total,nnz,sparsity"));
    assert_eq!(csv.lines().count(), 9);
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",0.000000"), "{line}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("layers.csv.json")).unwrap()).unwrap();
    assert_eq!(summary["compression_ratio"], 1.0);
}

#[test]
fn auto_lambda_resolves_from_target() {
    let dir = setup();
    let d = dir.path();
    let out = ok(
        d,
        &[
            "train", "--config", "tiny.cfg", "--data", "data.jsonl", "--method", "gated", "--starget", "0.9",
            "--lambda-s", "auto", "--out", "g",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_s = 5\n"));
    let echo = fs::read_to_string(d.join("g/config.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "lambda_s=5"), "{echo}");
    assert!(echo.lines().any(|l| l == "rnn_size=8"));
    let metrics = fs::read_to_string(d.join("g/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["sparsity_ml"].is_number() && v["alpha"].is_number());
    }
}

#[test]
fn full_pipeline_emits_all_artifacts() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &["train", "--config", "tiny.cfg", "--data", "data.jsonl", "--method", "gated", "--starget", "0.8", "--out", "s1"],
    );
    ok(d, &["finetune", "--ckpt", "s1/final.gckp", "--data", "data.jsonl", "--out", "s2"]);
    ok(d, &["export", "--ckpt", "s2/final.gckp", "--out", "model.gspm"]);
    let out = ok(
        d,
        &[
            "eval", "--model", "model.gspm", "--data", "data.jsonl", "--beam", "3", "--workers", "2", "--out",
            "eval.csv", "--captions", "captions.txt",
        ],
    );
    for f in [
        "s1/final.gckp",
        "s1/last.gckp",
        "s1/metrics.jsonl",
        "s1/config.txt",
        "s2/final.gckp",
        "s2/metrics.jsonl",
        "model.gspm",
        "eval.csv",
        "eval.csv.config",
        "captions.txt",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(d.join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model_id,sparsity,cr,b1,b2,b3,b4,uniqueness_pct,avg_len");
    assert_eq!(lines[1].split(',').count(), 9);
    assert!(lines[1].starts_with("model,"));
    assert_eq!(stdout(&out).lines().nth(1), Some(lines[1]));
    assert!(fs::read_to_string(d.join("eval.csv.config")).unwrap().contains("beam=3"));
    assert_eq!(fs::read_to_string(d.join("captions.txt")).unwrap().lines().count(), 20);

    // the eval result does not depend on the worker count
    ok(d, &["eval", "--model", "model.gspm", "--data", "data.jsonl", "--out", "eval1.csv"]);
    assert_eq!(fs::read_to_string(d.join("eval1.csv")).unwrap(), csv);
}

#[test]
fn hard_pruning_reaches_the_target() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train", "--config", "tiny.cfg", "--data", "data.jsonl", "--out", "dense"]);
    for scheme in ["blind", "uniform", "distribution"] {
        let out_dir = format!("hard_{scheme}");
        ok(
            d,
            &[
                "prune-hard", "--ckpt", "dense/final.gckp", "--data", "data.jsonl", "--scheme", scheme, "--starget",
                "0.75", "--retrain-epochs", "1", "--out", &out_dir,
            ],
        );
        let out = ok(d, &["report", "--model", &format!("{out_dir}/final.gckp"), "--out", "r.csv"]);
        assert!(stdout(&out).contains("sparsity 0.7500"), "{scheme}: {}", stdout(&out));
    }
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(
            d,
            &["train", "--config", "tiny.cfg", "--data", "data.jsonl", "--method", "gated", "--seed", "4", "--out", out],
        );
    }
    assert_eq!(fs::read(d.join("a/final.gckp")).unwrap(), fs::read(d.join("b/final.gckp")).unwrap());
    assert_eq!(
        fs::read(d.join("a/metrics.jsonl")).unwrap(),
        fs::read(d.join("b/metrics.jsonl")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &[
            "train", "--config", "tiny.cfg", "--set", "rnn_size=6", "--epochs", "1", "--data", "data.jsonl", "--out",
            "o",
        ],
    );
    let echo = fs::read_to_string(d.join("o/config.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "rnn_size=6"));
    assert!(echo.lines().any(|l| l == "epochs_stage1=1"));
    assert!(echo.lines().any(|l| l == "word_size=4"));
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let dir = setup();
    let d = dir.path();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--data", "data.jsonl", "--method", "gated", "--starget", "1.5", "--out", "x"],
        vec!["train", "--data", "missing.jsonl", "--out", "x"],
        vec!["train", "--data", "data.jsonl", "--method", "sparse", "--out", "x"],
        vec!["train", "--data", "data.jsonl", "--set", "nope=1", "--out", "x"],
        vec!["eval", "--model", "missing.gspm", "--data", "data.jsonl", "--out", "e.csv"],
        vec!["prune-hard", "--ckpt", "missing.gckp", "--data", "data.jsonl", "--out", "x"],
    ];
    for args in cases {
        let out = run(d, &args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
    fs::write(d.join("bad.cfg"), "rnn_sise=8\n").unwrap();
    let out = run(d, &["train", "--config", "bad.cfg", "--data", "data.jsonl", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rnn_sise"));

    ok(d, &["train", "--config", "tiny.cfg", "--data", "data.jsonl", "--out", "dense"]);
    let out = run(d, &["finetune", "--ckpt", "dense/final.gckp", "--data", "data.jsonl", "--out", "f"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gate"));
}

#[test]
fn help_documents_the_defaults() {
    let dir = TempDir::new().unwrap();
    let train = stdout(&ok(dir.path(), &["train", "--help"]));
    for needle in ["[default: 0.9]", "[default: auto]", "[default: 5.0]", "[default: 30]", "[default: lstm]"] {
        assert!(train.contains(needle), "train --help lacks {needle}");
    }
    let ft = stdout(&ok(dir.path(), &["finetune", "--help"]));
    assert!(ft.contains("[default: 10]"));
    let hard = stdout(&ok(dir.path(), &["prune-hard", "--help"]));
    assert!(hard.contains("[default: blind]") && hard.contains("[default: 10]"));
    let eval = stdout(&ok(dir.path(), &["eval", "--help"]));
    assert!(eval.contains("[default: 3]"));
    for sub in ["gen-data", "export", "report"] {
        ok(dir.path(), &[sub, "--help"]);
    }
}
