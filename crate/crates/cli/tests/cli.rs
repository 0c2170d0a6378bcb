use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn rise(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rise"))
        .args(args)
        .arg("--config")
        .arg(smoke())
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn missing_prerequisites_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = rise(&["improve"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("gen-data"), "{}", text(&o));
}

#[test]
fn unknown_axis_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rise(&["ablate", "--axis", "depth"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn invalid_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"tasks": []}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rise"))
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = rise(&["train-value", "--dry-run"], &run);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("config ok"));
    assert!(!run.exists());
}

#[test]
fn stages_chain_and_rerun_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    for stage in ["gen-data", "train-dynamics", "train-value", "warmup", "improve", "eval"] {
        let o = rise(&[stage], &run);
        assert!(o.status.success(), "{stage}: {}", text(&o));
    }
    let o = rise(&["gen-data"], &run);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("--force"));
    let o = rise(&["gen-data", "--force"], &run);
    assert!(o.status.success(), "{}", text(&o));
    assert!(run.join("eval/policy_improved.json").exists());
}
