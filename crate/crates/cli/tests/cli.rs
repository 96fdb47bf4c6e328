use std::process::Command;

fn perfhom() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perfhom"))
}

#[test]
fn audit_writes_outputs_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let status = perfhom().args(["audit", "--out"]).arg(dir.path()).args(["--seed", "3"]).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("audit.json")).unwrap()).unwrap();
    assert_eq!(json["passed"], serde_json::Value::Bool(true));
    assert_eq!(json["config"]["seed"], 3);
    assert!(std::fs::read_to_string(dir.path().join("audit.csv")).unwrap().lines().count() > 1);
}

#[test]
fn cell_solve_reports_effective_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = perfhom().args(["cell-solve", "--tol", "1e-11", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cell-solve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn mismatched_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("audit.json");
    let audit = perfhom().args(["audit", "--out"]).arg(dir.path()).status().unwrap();
    assert!(audit.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string(&json["config"]).unwrap()).unwrap();
    let out = perfhom().args(["flux", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("audit"));
    let again = perfhom().args(["audit", "--config"]).arg(&cfg_path).args(["--out"]).arg(dir.path()).status().unwrap();
    assert!(again.success());
}

#[test]
fn invalid_overrides_are_rejected() {
    let out = perfhom().args(["audit", "--threads", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = perfhom().args(["audit", "--tol=-1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = perfhom().args(["audit", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn floor_dominated_rate_study_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert!(perfhom().args(["audit", "--out"]).arg(dir.path()).status().unwrap().success());
    let text = std::fs::read_to_string(dir.path().join("audit.json")).unwrap();
    let mut cfg = serde_json::from_str::<serde_json::Value>(&text).unwrap()["config"].clone();
    cfg["operator"] = serde_json::json!({"family": "linear", "coeff": {"kind": "constant", "matrix": [[1.0, 0.0], [0.0, 1.0]]}, "mu0": 1.0});
    cfg["problem"] = serde_json::json!({"kind": "resolvent_rate", "lambda": 1.0, "source": {"kind": "constant", "value": 1.0}});
    cfg["eps"] = serde_json::json!([0.25, 0.125, 0.0625]);
    let path = dir.path().join("rate.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let status = perfhom().args(["rate-study", "--config"]).arg(&path).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rate-study.json")).unwrap()).unwrap();
    assert!(report["flags"].as_array().unwrap().iter().any(|f| f.as_str().unwrap().contains("floor")));
}
