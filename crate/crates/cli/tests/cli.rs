use std::process::Command;

fn sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tensegrity-sim"))
}

#[test]
fn size_prints_the_sizing_report() {
    let out = sim().arg("size").output().unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let force = report["max_cable_force"].as_f64().unwrap();
    assert!((force - 174.0).abs() <= 1.0, "{force}");
    assert_eq!(report["satisfied"], true);
}

#[test]
fn experiments_write_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let status = sim()
        .args(["--seed", "3", "--format", "csv", "--out"])
        .arg(dir.path())
        .arg("length-test")
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(dir.path().join("length.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 13 * 4);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("length.summary.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert!(meta["summary"]["max_error_pct_bar"].as_f64().unwrap() < 1.0);
}

#[test]
fn custom_config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim().arg("config").output().unwrap();
    assert!(out.status.success());
    let path = dir.path().join("robot.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let traj = dir.path().join("run.bin");
    let out = sim()
        .arg("--config")
        .arg(&path)
        .args(["locomote", "--duration", "1", "--decimation", "100", "--trajectory"])
        .arg(&traj)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["experiment"], "locomotion");
    assert_eq!(&std::fs::read(&traj).unwrap()[..4], b"TGTJ");
}

#[test]
fn bad_input_is_an_error() {
    assert!(!sim()
        .args(["length-test", "--material", "Unobtainium"])
        .status()
        .unwrap()
        .success());
    assert!(!sim()
        .args(["--config", "/nonexistent.toml", "size"])
        .status()
        .unwrap()
        .success());
}
