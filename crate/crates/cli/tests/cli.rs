use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_recourse");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exited normally")
}

/// Synthetic credit data plus a short training run in `m/`.
fn trained(lambda: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "synth",
            "--dataset",
            "german",
            "--rows",
            "300",
            "--seed",
            "5",
            "--out",
            "data",
        ],
    );
    ok(
        p,
        &[
            "train",
            "--config",
            "data/german.toml",
            "--data",
            "data/german.csv",
            "--lambda",
            lambda,
            "--epochs",
            "3",
            "--batch-size",
            "30",
            "--seed",
            "1",
            "--out",
            "m",
        ],
    );
    dir
}

#[test]
fn pipeline_train_calibrate_recourse_evaluate() {
    let dir = trained("0.8");
    let p = dir.path();
    let log = fs::read_to_string(p.join("m/train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("epoch,supervised_loss,recourse_loss"));
    let rec: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert!(rec > 0.0);
    assert!(p.join("m/manifest.json").exists());

    let msg = ok(
        p,
        &[
            "calibrate",
            "--checkpoint",
            "m/checkpoint.json",
            "--threshold-policy",
            "pare",
            "--epsilon",
            "0.05",
            "--alpha",
            "0.05",
        ],
    );
    assert!(msg.contains("k*"), "{msg}");
    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("m/checkpoint.json")).unwrap()).unwrap();
    let tau = ck["calibration"]["tau"].as_f64().unwrap();
    assert_eq!(ck["params"]["threshold"].as_f64().unwrap(), tau);
    assert_eq!(ck["policy"]["policy"], "pare");

    let csv = ok(
        p,
        &[
            "recourse",
            "--checkpoint",
            "m/checkpoint.json",
            "--algorithm",
            "lp",
            "--split",
            "test",
        ],
    );
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let header = r.headers().unwrap().clone();
    for name in [
        "id",
        "valid",
        "post_score",
        "age",
        "age_new",
        "age_delta",
        "credit_amount_delta",
    ] {
        assert!(header.iter().any(|h| h == name), "missing {name}");
    }
    let duration_delta = header.iter().position(|h| h == "duration_delta").unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 30);
    for row in &rows {
        assert_eq!(row[duration_delta].parse::<f64>().unwrap(), 0.0);
    }

    ok(
        p,
        &[
            "evaluate",
            "--checkpoint",
            "m/checkpoint.json",
            "--algorithm",
            "lp,linear",
            "--out",
            "eval/metrics.json",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["recourse"].as_array().unwrap().len(), 2);
    assert_eq!(report["metrics"]["threshold"].as_f64().unwrap(), tau);
    assert!(report["disparity"].is_array());
    assert!(report["noise"]["model_brittleness"]["total"].as_u64().unwrap() == 30);
}

#[test]
fn training_is_reproducible() {
    let dir = trained("0.8");
    let p = dir.path();
    ok(
        p,
        &[
            "train",
            "--config",
            "data/german.toml",
            "--data",
            "data/german.csv",
            "--lambda",
            "0.8",
            "--epochs",
            "3",
            "--batch-size",
            "30",
            "--seed",
            "1",
            "--out",
            "again",
        ],
    );
    for f in ["checkpoint.json", "train_log.csv", "manifest.json"] {
        assert_eq!(
            fs::read(p.join("m").join(f)).unwrap(),
            fs::read(p.join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    let other = tempfile::tempdir().unwrap();
    ok(
        other.path(),
        &[
            "synth",
            "--dataset",
            "german",
            "--rows",
            "300",
            "--seed",
            "5",
            "--out",
            "data",
        ],
    );
    assert_eq!(
        fs::read(p.join("data/german.csv")).unwrap(),
        fs::read(other.path().join("data/german.csv")).unwrap()
    );
}

#[test]
fn lambda_zero_logs_no_recourse_loss() {
    let dir = trained("0");
    let log = fs::read_to_string(dir.path().join("m/train_log.csv")).unwrap();
    for line in log.lines().skip(1) {
        assert_eq!(line.split(',').nth(2).unwrap(), "0.0");
    }
}

#[test]
fn recourse_keeps_request_order() {
    let dir = trained("0.8");
    let p = dir.path();
    fs::write(p.join("ids.txt"), "7\n2 19,0\n2\n").unwrap();
    let csv = ok(
        p,
        &[
            "recourse",
            "--checkpoint",
            "m/checkpoint.json",
            "--algorithm",
            "lp",
            "--ids-file",
            "ids.txt",
            "--out",
            "r.csv",
        ],
    );
    assert!(csv.is_empty());
    let mut r = csv::Reader::from_path(p.join("r.csv")).unwrap();
    let ids: Vec<String> = r.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(ids, ["7", "2", "19", "0", "2"]);

    // A subset gives the same rows as the full split.
    let all = ok(
        p,
        &["recourse", "--checkpoint", "m/checkpoint.json", "--algorithm", "linear"],
    );
    let some = ok(
        p,
        &[
            "recourse",
            "--checkpoint",
            "m/checkpoint.json",
            "--algorithm",
            "linear",
            "--ids",
            "4,1",
        ],
    );
    let all: Vec<&str> = all.lines().collect();
    let some: Vec<&str> = some.lines().collect();
    assert_eq!(some, [all[0], all[5], all[2]]);
}

#[test]
fn positive_predictions_get_zero_action() {
    let dir = trained("0.8");
    let p = dir.path();
    ok(
        p,
        &[
            "calibrate",
            "--checkpoint",
            "m/checkpoint.json",
            "--threshold-policy",
            "fixed",
            "--threshold",
            "0",
        ],
    );
    let csv = ok(
        p,
        &[
            "recourse",
            "--checkpoint",
            "m/checkpoint.json",
            "--algorithm",
            "gd",
            "--ids",
            "0,1,2",
        ],
    );
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let header = r.headers().unwrap().clone();
    for row in r.records() {
        let row = row.unwrap();
        assert_eq!(&row[3], "true");
        for (h, v) in header.iter().zip(row.iter()) {
            if h.ends_with("_delta") {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn exit_codes() {
    let dir = trained("0");
    let p = dir.path();
    // Missing PAC parameters and unknown flags are configuration errors.
    assert_eq!(
        code(
            p,
            &[
                "calibrate",
                "--checkpoint",
                "m/checkpoint.json",
                "--threshold-policy",
                "pare"
            ]
        ),
        2
    );
    assert_eq!(
        code(
            p,
            &[
                "calibrate",
                "--checkpoint",
                "m/checkpoint.json",
                "--threshold-policy",
                "fixed"
            ]
        ),
        2
    );
    assert_eq!(code(p, &["train", "--bogus"]), 2);
    assert_eq!(
        code(
            p,
            &[
                "calibrate",
                "--checkpoint",
                "m/checkpoint.json",
                "--threshold-policy",
                "pare",
                "--epsilon",
                "1.5",
                "--alpha",
                "0.05"
            ]
        ),
        2
    );
    // Unreadable inputs are data errors.
    assert_eq!(code(p, &["evaluate", "--checkpoint", "missing.json"]), 3);
    fs::write(
        p.join("bad.csv"),
        "gender,age,duration,credit_amount,risk\n1,x,3,4,good\n",
    )
    .unwrap();
    assert_eq!(
        code(
            p,
            &[
                "train",
                "--config",
                "data/german.toml",
                "--data",
                "bad.csv",
                "--out",
                "o"
            ]
        ),
        3
    );
}

#[test]
fn evaluate_rejects_empty_split() {
    let dir = trained("0");
    let p = dir.path();
    let cfg = fs::read_to_string(p.join("data/german.toml")).unwrap();
    let emptied = cfg.replace("test_holdout = 30", "test_holdout = 0");
    assert_ne!(cfg, emptied);
    fs::write(p.join("data/german.toml"), emptied).unwrap();
    let out = run(
        p,
        &["evaluate", "--checkpoint", "m/checkpoint.json", "--algorithm", "lp"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("test split is empty"));
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--dataset", "german", "--rows", "200", "--out", "data"]);
    ok(
        p,
        &[
            "sweep",
            "--config",
            "data/german.toml",
            "--data",
            "data/german.csv",
            "--axis",
            "threshold",
            "--values",
            "0.2,0.5,0.8",
            "--seeds",
            "0,1",
            "--epochs",
            "2",
            "--algorithm",
            "lp",
            "--out",
            "s",
        ],
    );
    let rows = fs::read_to_string(p.join("s/sweep_rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);
    assert!(rows.lines().next().unwrap().contains("recourse_all_lp"));
    let summary = fs::read_to_string(p.join("s/sweep_summary.csv")).unwrap();
    assert!(summary.lines().count() > 3);
    assert!(p.join("s/manifest.json").exists());
}
