use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "model": {"hidden": 16, "heads": 2, "attention_blocks": 1, "lstm_layers": 1, "dropout": 0.1},
  "train": {"lr": 0.003, "batch": 16, "max_epochs": 2, "patience": 2},
  "stride": 6
}"#;

fn omnitft(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnitft"))
        .args(args)
        .current_dir(dir)
        .env_remove("OMNITFT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--patients",
        "20",
        "--seed",
        "1",
        "--encoder-len",
        "24",
        "--horizon-len",
        "6",
        "--steps",
        "80",
        "--out",
        name,
    ];
    args.extend_from_slice(extra);
    ok(&omnitft(&args, dir));
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn synth_is_reproducible_and_listed() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", &[]);
    synth(tmp.path(), "b", &[]);
    for f in ["events.csv", "schema.json", "regimes.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let m = manifest(&tmp.path().join("a"));
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 3);
    assert_eq!(m["seeds"]["seed"], 1);
}

#[test]
fn zero_shock_rate_is_all_stable() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d", &["--shock-rate", "0"]);
    let regimes = fs::read_to_string(tmp.path().join("d/regimes.csv")).unwrap();
    assert!(regimes.lines().skip(1).all(|l| l.ends_with(",stable")));
}

#[test]
fn missing_schema_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = omnitft(&["train", "--data", "empty", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn bad_thread_setting_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_omnitft"))
        .args(["synth", "--out", "x"])
        .current_dir(tmp.path())
        .env("OMNITFT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_trains_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d", &[]);
    fs::write(tmp.path().join("tiny.json"), TINY).unwrap();
    let out = omnitft(
        &[
            "train",
            "--data",
            "d",
            "--config",
            "tiny.json",
            "--out",
            "run",
            "--dry-run",
        ],
        tmp.path(),
    );
    ok(&out);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["windows"]["train"].as_u64().unwrap() > 0);
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    synth(p, "d", &[]);
    fs::write(p.join("tiny.json"), TINY).unwrap();
    ok(&omnitft(
        &[
            "train",
            "--data",
            "d",
            "--config",
            "tiny.json",
            "--out",
            "run",
        ],
        p,
    ));
    let m = manifest(&p.join("run"));
    let names: Vec<&str> = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"model.ckpt") && names.contains(&"history.csv"));
    let history = fs::read_to_string(p.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    ok(&omnitft(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "d",
            "--out",
            "e1",
        ],
        p,
    ));
    ok(&omnitft(
        &[
            "--sequential",
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "d",
            "--out",
            "e2",
        ],
        p,
    ));
    for f in [
        "metrics.json",
        "metrics.txt",
        "importance.csv",
        "trajectory_hr.csv",
    ] {
        assert_eq!(
            fs::read(p.join("e1").join(f)).unwrap(),
            fs::read(p.join("e2").join(f)).unwrap(),
            "{f}"
        );
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(p.join("e1/metrics.json")).unwrap()).unwrap();
    assert!(report["rmbe_definition"]
        .as_str()
        .unwrap()
        .contains("mean(actual)"));
    assert_eq!(report["interval_metrics_sorted"], true);
    let traj = fs::read_to_string(p.join("e1/trajectory_hr.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 24 + 6);

    let mut doc: Value =
        serde_json::from_str(&fs::read_to_string(p.join("d/schema.json")).unwrap()).unwrap();
    doc["encoder_len"] = 12.into();
    fs::create_dir(p.join("other")).unwrap();
    fs::copy(p.join("d/events.csv"), p.join("other/events.csv")).unwrap();
    fs::write(p.join("other/schema.json"), doc.to_string()).unwrap();
    let out = omnitft(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "other",
            "--out",
            "e3",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    synth(p, "d", &[]);
    fs::write(
        p.join("div.json"),
        r#"{"train": {"lr": 1e300, "clip": 1e300, "max_epochs": 3},
            "model": {"hidden": 8, "heads": 2, "attention_blocks": 1, "lstm_layers": 1}, "stride": 12}"#,
    )
    .unwrap();
    let out = omnitft(
        &[
            "train", "--data", "d", "--config", "div.json", "--out", "run",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(p.join("run/model.ckpt").exists());
    let out = omnitft(
        &[
            "train",
            "--data",
            "d",
            "--config",
            "nope.json",
            "--out",
            "run",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn label_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    synth(p, "d", &[]);
    let out = omnitft(
        &["label", "--data", "d", "--method", "hmm", "--out", "l1"],
        p,
    );
    ok(&out);
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    let w = &s["windows"];
    assert_eq!(
        w["stable"].as_u64().unwrap() + w["volatile"].as_u64().unwrap(),
        w["total"].as_u64().unwrap()
    );
    let rows = fs::read_to_string(p.join("l1/labels.csv"))
        .unwrap()
        .lines()
        .count() as u64
        - 1;
    assert_eq!(rows, w["total"].as_u64().unwrap());
    for k in ["threshold_vs_hmm", "threshold_vs_truth", "hmm_vs_truth"] {
        let a = s["agreement"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a), "{k} = {a}");
    }

    fs::write(p.join("delta.json"), r#"{"delta": {"hr": 1000.0}}"#).unwrap();
    let out = omnitft(
        &[
            "label",
            "--data",
            "d",
            "--delta-config",
            "delta.json",
            "--out",
            "l2",
        ],
        p,
    );
    ok(&out);
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s["deltas"]["hr"], 1000.0);
    assert_eq!(s["windows"]["volatile"], 0);

    fs::write(p.join("delta.json"), r#"{"delta": {"rr": 1.0}}"#).unwrap();
    let out = omnitft(
        &[
            "label",
            "--data",
            "d",
            "--delta-config",
            "delta.json",
            "--out",
            "l3",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
}
