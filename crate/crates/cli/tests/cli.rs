use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linresp")).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn respond_writes_curve_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("tent19_conj.json");
    let o = run(&["respond", "--config", cfg.to_str().unwrap(), "--grid", "2048"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("response.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,R,l1dist");
    assert!(csv.lines().count() > 5);
    let fit = json(&dir.path().join("fit.json"));
    assert!(fit.to_string().contains("slope"));
    assert!(dir.path().join("checks.json").exists());
}

#[test]
fn density_json_has_unit_mass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("nonhorizontal.json");
    let o = run(&["density", "--config", cfg.to_str().unwrap(), "--grid", "1024"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("density.csv").exists());
    let checks = json(&dir.path().join("checks.json"));
    assert!(checks.to_string().contains("unit mass"));
}

#[test]
fn psi1_refuses_non_horizontal_deformation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("nonhorizontal.json");
    let o = run(&["psi1", "--config", cfg.to_str().unwrap(), "--grid", "1024"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "NotHorizontal");
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"map": {"family": "tent", "slope": 1.9}, "no_such_field": 1}"#).unwrap();
    let o = run(&["density", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert!(err["message"].is_string());
}

#[test]
fn missing_family_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("nonhorizontal.json");
    let o = run(&["respond", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
