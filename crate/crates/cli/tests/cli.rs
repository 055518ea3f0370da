use std::fs;
use std::path::Path;
use std::process::Command;

fn multifed(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_multifed"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn run_exports_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("default.json");
    let out = multifed(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let server = fs::read_to_string(dir.path().join("server_loss.csv")).unwrap();
    assert_eq!(server.lines().count(), 1 + 2 * 3);
    for f in ["client_loss.csv", "delivery.csv", "config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = multifed(&["run", "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert!(cfg.contains("\"seed\": 7"));
}

#[test]
fn compare_prints_gap_json() {
    let multi = configs().join("default.json");
    let single = configs().join("single.json");
    let out = multifed(&["compare", "--config", multi.to_str().unwrap(), "--baseline", single.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["relative_final_loss_gap"], 0.0);
    assert_eq!(v["per_round_gaps"].as_array().unwrap().len(), 3);
}

#[test]
fn gen_data_output_feeds_a_csv_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = multifed(&["gen-data", "--regions", "3", "--rows-per-region", "20", "--out", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = dir.path().join("csv.json");
    fs::write(
        &cfg,
        r#"{"data": {"csv": {"path": "data/events.csv", "stations": "data/stations.csv"}}, "rounds": 2}"#,
    )
    .unwrap();
    let res = dir.path().join("res");
    let out = multifed(&["run", "--config", cfg.to_str().unwrap(), "--out", res.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let delivery = fs::read_to_string(res.join("delivery.csv")).unwrap();
    assert_eq!(delivery.lines().count(), 1 + 3 * 2);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"rounds": 0}"#).unwrap();
    assert_eq!(multifed(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    assert_eq!(multifed(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(multifed(&["run", "--listen", "gs1"]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = multifed(&["run", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
