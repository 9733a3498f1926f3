use std::path::Path;
use std::process::Command;

const PROBLEM: &str = r#"
background_conductivity = 0.1

[domain]
x = [-150.0, 150.0]
y = [-150.0, 150.0]
cells = [8, 8]

[receiver_grid]
origin = [-30.0, -30.0]
spacing = [30.0, 30.0]
counts = [3, 3]

[source]
kind = "box"
min = [-40.0, -40.0]
max = [40.0, 40.0]
amplitude = 1.0

[[anomalies]]
min = [-80.0, -40.0]
max = [-20.0, 40.0]
conductivity = 1.0
"#;

fn rbatem(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_rbatem"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run rbatem");
    assert!(
        out.status.success(),
        "rbatem {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("problem.toml"), PROBLEM).unwrap();
    rbatem(dir, &["fit-rba", "--times-log10", "-5:-3:6", "--poles", "8", "--xmax", "1e9", "--out", "approx.json"]);
    rbatem(dir, &["forward", "--problem", "problem.toml", "--approx", "approx.json", "--out", "response.json", "--export-matrices", "mtx"]);
    let response: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("response.json")).unwrap()).unwrap();
    assert_eq!(response["data"].as_array().unwrap().len(), 6 * 9);
    assert_eq!(response["counters"]["factorizations"], 8);
    for m in ["K.mtx", "M.mtx", "Q.mtx", "f.mtx"] {
        assert!(dir.join("mtx").join(m).exists(), "{m}");
    }

    rbatem(dir, &["make-data", "--problem", "problem.toml", "--approx", "approx.json", "--seed", "4", "--out", "data.json"]);
    let again = tmp.path().join("again.json");
    rbatem(dir, &["make-data", "--problem", "problem.toml", "--approx", "approx.json", "--seed", "4", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(dir.join("data.json")).unwrap(), std::fs::read(&again).unwrap());

    rbatem(dir, &["invert", "--problem", "problem.toml", "--data", "data.json", "--approx", "approx.json", "--lambda0", "10", "--max-gn", "4", "--workers", "2", "--out", "run"]);
    for f in ["state.json", "convergence.csv", "residual_heatmap.csv", "transients.csv", "timing.csv", "report.json", "model.json"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    let heat = std::fs::read_to_string(dir.join("run/residual_heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 6);
    assert_eq!(heat.lines().next().unwrap().split(',').count(), 1 + 9);

    rbatem(dir, &["bench-scaling", "--problem", "problem.toml", "--approx", "approx.json", "--workers", "1,2", "--repeats", "1", "--out", "run/scaling.json"]);
    rbatem(dir, &["report", "--rundir", "run"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["scaling"].as_array().unwrap().len(), 2);
    assert!(report["history"].as_array().unwrap().len() <= 4);

    rbatem(dir, &["verify", "--problem", "problem.toml", "--approx", "approx.json", "--trials", "3", "--out", "verify"]);
    let verify: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("verify/verify.json")).unwrap()).unwrap();
    assert!(verify["adjoint_max_mismatch"].as_f64().unwrap() < 1e-10);
    assert!(dir.join("verify/taylor.csv").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rbatem"))
        .args(["fit-rba", "--times-log10", "-6:-3", "--out", "a.json"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_rbatem"))
        .args(["forward", "--problem", "missing.toml", "--approx", "a.json", "--out", "r.json"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
}
