use std::path::Path;
use std::process::{Command, Output};

fn meshcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshcast"))
        .args(args)
        .current_dir(dir)
        .env_remove("MESHCAST_CONFIG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "sim.sensors = 3\nsim.days = 40\nforecast.max_epochs = 2\nforecast.window = 6\n";

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&[][..], &["frobnicate"], &["simulate", "--bogus"], &["eval", "table3"]] {
        let out = meshcast(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(meshcast(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshcast(dir.path(), &["ingest", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.cfg"), "sim.colour = red\n").unwrap();
    assert_eq!(meshcast(dir.path(), &["simulate", "--config", "bad.cfg"]).status.code(), Some(2));
}

#[test]
fn ingest_reports_removed_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("timestamp,sensor_id,temperature_c,humidity_pct,pressure_hpa\n");
    for h in 0..5 {
        csv.push_str(&format!("2024-01-01T{h:02}:00:00Z,s1,25.0,60.0,1005.0\n"));
    }
    std::fs::write(dir.path().join("five.csv"), csv).unwrap();
    let out = meshcast(dir.path(), &["ingest", "five.csv", "--out", "clean.csv"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).lines().any(|l| l == "removed_count=3"), "{}", stdout(&out));
    let cleaned = std::fs::read_to_string(dir.path().join("clean.csv")).unwrap();
    assert_eq!(cleaned.lines().count(), 1 + 2);
}

#[test]
fn config_env_fallback_is_used() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("env.cfg"), "sim.sensors = 2\nsim.days = 3\nsim.anomalies = none\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_meshcast"))
        .args(["simulate", "--out", "d"])
        .current_dir(dir.path())
        .env("MESHCAST_CONFIG", "env.cfg")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let readings = std::fs::read_to_string(dir.path().join("d/readings.csv")).unwrap();
    assert_eq!(readings.lines().count(), 1 + 2 * 3 * 24);
}

#[test]
fn simulate_train_forecast_detect() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("small.cfg"), SMALL).unwrap();
    let sim = meshcast(p, &["simulate", "--config", "small.cfg", "--seed", "5", "--out", "d"]);
    assert_eq!(sim.status.code(), Some(0));
    let labels = std::fs::read_to_string(p.join("d/labels.csv")).unwrap();
    assert!(labels.starts_with("sensor_id,start,end,kind\n"));

    std::fs::write(p.join("csv.cfg"), format!("{SMALL}data.csv = d/readings.csv\n")).unwrap();
    let train = meshcast(p, &["train", "--config", "csv.cfg", "--kind", "gru", "--out", "m"]);
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(p.join("m/checkpoint.json").exists() && p.join("m/train_report.json").exists());

    let fc = meshcast(
        p,
        &["forecast", "m/checkpoint.json", "--config", "csv.cfg", "--sensor", "s2", "--anchor", "2024-01-15T11:00:00Z"],
    );
    assert_eq!(fc.status.code(), Some(0), "{}", String::from_utf8_lossy(&fc.stderr));
    let lines: Vec<String> = stdout(&fc).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 1 + 24);
    assert!(lines[1].starts_with("2024-01-15T12:00:00Z,s2,"));
    assert!(lines[24].starts_with("2024-01-16T11:00:00Z,s2,"));

    let early = meshcast(
        p,
        &["forecast", "m/checkpoint.json", "--config", "csv.cfg", "--sensor", "s2", "--anchor", "2024-01-01T01:00:00Z"],
    );
    assert_eq!(early.status.code(), Some(2));

    let det = meshcast(p, &["detect", "--config", "csv.cfg", "--out", "alerts.ndjson"]);
    assert_eq!(det.status.code(), Some(0));
    let alerts = std::fs::read_to_string(p.join("alerts.ndjson")).unwrap();
    for line in alerts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("sensor_id").is_some() && v.get("likelihood").is_some());
    }
}

#[test]
fn table2_without_anomalies_reports_na() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), format!("{SMALL}sim.anomalies = none\neval.sweep = 0.9,0.99\n")).unwrap();
    let out = meshcast(dir.path(), &["eval", "table2", "--config", "c.cfg", "--out", "r"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("n/a"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/table2.json")).unwrap()).unwrap();
    assert!(report["metrics"]["tpr"].is_null());
    assert!(report["metrics"]["fpr"].is_number());
    assert_eq!(report["sweep"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("r/table2.latency.json").exists());
}
