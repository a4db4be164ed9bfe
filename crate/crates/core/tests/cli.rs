mod common;

use std::path::Path;
use std::process::{Command, Output};

use prunekit::metrics::effective_pruned_pct;
use prunekit::model::{build_lenet5, checkpoint};
use prunekit::prune::Variant;
use serde_json::Value;

fn prunekit(args: &[&str], env_data: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prunekit"));
    cmd.args(args).env_remove("PRUNEKIT_DATA_DIR");
    if let Some(d) = env_data {
        cmd.env("PRUNEKIT_DATA_DIR", d);
    }
    cmd.output().unwrap()
}

fn json_lines(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON: {l}: {e}")))
        .collect()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr has an error record");
    let v: Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["event"], "error");
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = prunekit(&["eval", "--no-such-flag"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let rec = error_record(&out);
    assert_eq!(rec["kind"], "usage");
    assert!(rec["message"].as_str().unwrap().contains("--no-such-flag"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = prunekit(
        &[
            "eval",
            "--checkpoint",
            s(&tmp.path().join("absent.ckpt")),
            "--out-dir",
            s(&out_dir),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["kind"], "io");
    assert!(out_dir.join("config.json").is_file());
}

#[test]
fn bad_schedule_and_missing_checkpoint_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = prunekit(
        &[
            "prune",
            "iterative",
            "--p-start",
            "0.9",
            "--p-max",
            "0.1",
            "--out-dir",
            s(tmp.path()),
        ],
        None,
    );
    assert_ne!(out.status.code(), Some(0));
    error_record(&out);
    let out = prunekit(&["compact", "--out-dir", s(tmp.path())], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"]
        .as_str()
        .unwrap()
        .contains("--checkpoint"));
}

#[test]
fn eval_of_an_untrained_model_is_at_chance() {
    let Some(data) = common::mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut m = build_lenet5();
    m.init_params(123);
    let ckpt = tmp.path().join("fresh.ckpt");
    checkpoint::save(&ckpt, &m, &Default::default()).unwrap();
    let out_dir = tmp.path().join("eval");
    // Data directory from the environment only.
    let out = prunekit(
        &["eval", "--checkpoint", s(&ckpt), "--out-dir", s(&out_dir)],
        Some(&data),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines = json_lines(&out.stdout);
    let result = lines.last().unwrap();
    assert_eq!(result["event"], "result");
    let acc = result["accuracy"].as_f64().unwrap();
    println!("untrained accuracy {acc}");
    assert!((acc - 0.10).abs() <= 0.03, "{acc}");
    assert_eq!(result["stats"]["param_pruned_pct"], 0.0);
    let cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["data_dir"], s(&data));
    assert_eq!(cfg["command"], "eval");
}

#[test]
fn small_workflow_end_to_end() {
    let Some(data) = common::mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    let limits = [
        "--data-dir",
        s(&data),
        "--train-limit",
        "256",
        "--test-limit",
        "200",
    ];
    let with = |extra: &[&str]| -> Vec<String> {
        extra.iter().chain(&limits).map(|x| x.to_string()).collect()
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = prunekit(&refs, None);
        assert!(
            out.status.success(),
            "{refs:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        json_lines(&out.stdout)
    };

    let cfg_file = d("cfg.json");
    std::fs::write(
        &cfg_file,
        r#"{"epochs": 3, "batch_size": 16, "base_lr": 0.02}"#,
    )
    .unwrap();
    let lines = run(with(&[
        "train",
        "--config",
        s(&cfg_file),
        "--epochs",
        "1",
        "--out-dir",
        s(&d("train")),
    ]));
    let epochs: Vec<&Value> = lines.iter().filter(|l| l["event"] == "epoch").collect();
    assert_eq!(epochs.len(), 1);
    let cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(d("train/config.json")).unwrap()).unwrap();
    assert_eq!(
        (cfg["epochs"].as_u64(), cfg["batch_size"].as_u64()),
        (Some(1), Some(16))
    );
    let base = d("train/model.ckpt");

    let lines = run(with(&[
        "prune",
        "oneshot",
        "--checkpoint",
        s(&base),
        "--out-dir",
        s(&d("oneshot")),
        "--p",
        "0.6",
        "--retrain-epochs",
        "1",
        "--epsilon",
        "100",
        "--batch-size",
        "16",
    ]));
    let result = lines.last().unwrap();
    assert_eq!(result["cumulative_p"], 0.6);
    for f in [
        "history.json",
        "final.ckpt",
        "report/report.json",
        "report/pattern.csv",
        "report/evolution.csv",
        "report/histogram.csv",
    ] {
        assert!(d("oneshot").join(f).is_file(), "{f}");
    }

    let lines = run(with(&[
        "compact",
        "--checkpoint",
        s(&d("oneshot/final.ckpt")),
        "--out-dir",
        s(&d("compact")),
    ]));
    let result = lines.last().unwrap();
    assert!(result["deviation"].as_f64().unwrap() <= 1e-9);
    let small = checkpoint::load(d("compact/compact.ckpt")).unwrap().model;
    assert_eq!(
        small.param_count(prunekit::model::Counting::Total) as u64,
        result["params_after"].as_u64().unwrap()
    );

    let lines = run(with(&[
        "ablate",
        "--checkpoint",
        s(&base),
        "--out-dir",
        s(&d("ablate")),
        "--p-start",
        "0.5",
        "--p-step",
        "0.2",
        "--p-max",
        "0.9",
        "--retrain-epochs",
        "1",
        "--seeds",
        "0",
        "--batch-size",
        "32",
    ]));
    assert_eq!(
        lines.last().unwrap()["summary"].as_array().unwrap().len(),
        4
    );
    let table: Value =
        serde_json::from_str(&std::fs::read_to_string(d("ablate/ablation.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(table["retrain_epochs_oneshot"], 3);
    for r in rows {
        let v: Variant = r["variant"].as_str().unwrap().parse().unwrap();
        let p = r["param_pruned_pct"].as_f64().unwrap();
        assert_eq!(
            r["effective_pruned_pct"].as_f64().unwrap(),
            effective_pruned_pct(v, p)
        );
        assert_eq!(r["cumulative_p"], 0.9);
    }
    assert!(d("ablate/ours-seed0/final.ckpt").is_file());
    assert!(
        std::fs::read_to_string(d("ablate/ablation.csv"))
            .unwrap()
            .lines()
            .count()
            == 5
    );
}
