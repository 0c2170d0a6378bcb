use std::path::{Path, PathBuf};

use rise_core::pipeline::{load_policy, AblationAxis, Run, RunConfig, Stage};
use rise_core::Error;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn smoke() -> RunConfig {
    RunConfig::load(&repo_file("configs/smoke.json")).unwrap()
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let shipped = RunConfig::load(&repo_file("configs/default.json")).unwrap();
    assert_eq!(shipped, RunConfig::default());
    shipped.validate().unwrap();
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = RunConfig::from_json(r#"{"seed": 1, "lernrate": 3}"#).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn stages_refuse_to_run_before_their_inputs_exist() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(smoke(), Some(dir.path())).unwrap();
    for stage in [Stage::TrainDynamics, Stage::TrainValue, Stage::Warmup, Stage::Improve] {
        assert!(matches!(run.check_prerequisites(stage), Err(Error::Dependency { .. })), "{stage:?}");
    }
    assert!(matches!(run.improve(false), Err(Error::Dependency { .. })));
    assert!(matches!(run.eval(None, false), Err(Error::Dependency { .. })));
    run.check_prerequisites(Stage::GenData).unwrap();
}

#[test]
fn full_smoke_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(smoke(), Some(dir.path())).unwrap();
    run.gen_data(false).unwrap();
    run.train_dynamics(false).unwrap();
    run.train_value(false).unwrap();
    run.warmup(false).unwrap();
    run.improve(false).unwrap();
    let (_, report) = run.eval(None, false).unwrap();
    assert_eq!(report.tasks.len(), 2);
    run.ablate(AblationAxis::Bins, false).unwrap();

    for f in ["dynamics.csv", "value.csv", "policy_warmup.csv", "loop.csv", "loop_eval.csv"] {
        assert!(run.metrics(f.trim_end_matches(".csv")).exists(), "{f}");
    }
    let loop_csv = std::fs::read_to_string(run.metrics("loop")).unwrap();
    assert!(loop_csv.starts_with("iteration,buffer_size,mean_advantage,train_loss,eval_success,eval_score"));
    assert_eq!(loop_csv.lines().count(), 1 + smoke().improve.iterations);
    let policy = load_policy(&run.ckpt("policy_improved")).unwrap();
    assert_eq!(policy.binning.n_bins(), smoke().advantage.n_bins);
    assert!(dir.path().join("ablate/bins.csv").exists());

    let manifest = run.read_manifest().unwrap().unwrap();
    assert_eq!(manifest.config_hash, run.hash);
    assert!(manifest.stages.contains_key("improve"));

    // Rerunning without --force is refused; with it, outputs are identical.
    assert!(matches!(run.train_dynamics(false), Err(Error::Config(_))));
    let before = std::fs::read(run.metrics("dynamics")).unwrap();
    run.train_dynamics(true).unwrap();
    assert_eq!(std::fs::read(run.metrics("dynamics")).unwrap(), before);
}

#[test]
fn a_different_config_cannot_reuse_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    Run::new(smoke(), Some(dir.path())).unwrap().gen_data(false).unwrap();
    let other = RunConfig { seed: 9, ..smoke() };
    let err = Run::new(other, Some(dir.path())).unwrap().train_dynamics(false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
