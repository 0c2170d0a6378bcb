//! Run directories and the stage commands that read and write them.
//!
//! ```text
//! <run>/config.json  manifest.json
//! <run>/data/<task>_{train,heldout}.epb (+ .manifest.json)
//! <run>/ckpt/*.apx   <run>/metrics/*.csv   <run>/eval/   <run>/ablate/
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::codec::{read_dataset, split_paths, write_dataset};
use crate::domain::{Episode, TaskId};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvaluationReport};
use crate::policy::Policy;

use super::config::RunConfig;
use super::experiment::{
    ablation_arms, evaluate_arm, fit_dynamics, fit_value, fit_warmup, generate_data, improve as run_improve, warmup_dataset,
    AblationAxis, ArmResult, Datasets,
};
use super::store::{load_dynamics, load_policy, load_value, save_dynamics, save_policy, save_value};

pub const RUN_ROOT_ENV: &str = "RISE_RUN_ROOT";
const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainDynamics,
    TrainValue,
    Warmup,
    Improve,
    Eval,
    Ablate,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainDynamics => "train-dynamics",
            Stage::TrainValue => "train-value",
            Stage::Warmup => "warmup",
            Stage::Improve => "improve",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_unix: u64,
    /// Run-relative path to SHA-256 of every file the stage wrote.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub tasks: Vec<TaskId>,
    pub created_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub hash: String,
}

impl Run {
    /// Resolves the run directory: explicit `out`, then the config's `out`, then
    /// `$RISE_RUN_ROOT/run-<hash prefix>` (default root `runs`).
    pub fn new(config: RunConfig, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let dir = match (out, &config.out) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => o.clone(),
            (None, None) => {
                let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from);
                root.join(format!("run-{}", &hash[..12]))
            }
        };
        Ok(Run { dir, config, hash })
    }

    pub fn data_path(&self, task: TaskId, split: &str) -> PathBuf {
        split_paths(&self.dir.join("data"), &format!("{}_{split}", task.name())).0
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.dir.join("ckpt").join(format!("{name}.apx"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.dir.join("metrics").join(format!("{name}.csv"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn read_manifest(&self) -> Result<Option<RunManifest>> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }

    fn data_files(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        for &t in &self.config.tasks {
            for split in ["train", "heldout"] {
                let (data, manifest) = split_paths(&self.dir.join("data"), &format!("{}_{split}", t.name()));
                v.push(data);
                v.push(manifest);
            }
        }
        v
    }

    /// Artifacts each stage needs, tagged with the command that produces them.
    fn prerequisites(&self, stage: Stage) -> Vec<(PathBuf, Stage)> {
        let data = || self.data_files().into_iter().map(|p| (p, Stage::GenData)).collect::<Vec<_>>();
        let mut v = Vec::new();
        match stage {
            Stage::GenData | Stage::Eval => {}
            Stage::TrainDynamics | Stage::TrainValue => v.extend(data()),
            Stage::Warmup => {
                v.extend(data());
                v.push((self.ckpt("value"), Stage::TrainValue));
            }
            Stage::Improve | Stage::Ablate => {
                v.extend(data());
                v.push((self.ckpt("dynamics"), Stage::TrainDynamics));
                v.push((self.ckpt("value"), Stage::TrainValue));
                v.push((self.ckpt("policy_warmup"), Stage::Warmup));
            }
        }
        v
    }

    /// Fails with a dependency error naming the first missing upstream command.
    pub fn check_prerequisites(&self, stage: Stage) -> Result<()> {
        for (path, producer) in self.prerequisites(stage) {
            if !path.exists() {
                return Err(Error::Dependency {
                    artifact: path.display().to_string(),
                    command: producer.command().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Prerequisites, overwrite protection and manifest compatibility.
    fn begin(&self, stage: Stage, outputs: &[PathBuf], force: bool) -> Result<()> {
        self.check_prerequisites(stage)?;
        if !force {
            if let Some(p) = outputs.iter().find(|p| p.exists()) {
                return Err(Error::Config(format!("{} already exists; pass --force to overwrite", p.display())));
            }
            if let Some(m) = self.read_manifest()? {
                if m.config_hash != self.hash {
                    return Err(Error::Config(format!(
                        "{} belongs to config {}, not {}; choose another --out or pass --force",
                        self.dir.display(),
                        &m.config_hash[..12],
                        &self.hash[..12]
                    )));
                }
            }
        }
        fs::create_dir_all(&self.dir)?;
        let mut config = self.config.clone();
        config.out = None;
        fs::write(self.dir.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
        Ok(())
    }

    fn finish(&self, stage: Stage, artifacts: Vec<PathBuf>, summary: String) -> Result<StageOutput> {
        let now = unix_now();
        let mut manifest = match self.read_manifest()? {
            Some(m) if m.config_hash == self.hash => m,
            _ => RunManifest {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                tasks: self.config.tasks.clone(),
                created_unix: now,
                stages: BTreeMap::new(),
            },
        };
        let mut hashes = BTreeMap::new();
        for p in &artifacts {
            let rel = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            hashes.insert(rel, sha256_file(p)?);
        }
        manifest.stages.insert(stage.command().to_string(), StageRecord { completed_unix: now, artifacts: hashes });
        fs::write(self.manifest_path(), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(StageOutput { stage, artifacts, summary })
    }

    pub fn load_data(&self) -> Result<Datasets> {
        self.check_prerequisites(Stage::TrainDynamics)?;
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for &t in &self.config.tasks {
            train.extend(read_dataset(&self.data_path(t, "train"))?);
            heldout.extend(read_dataset(&self.data_path(t, "heldout"))?);
        }
        Ok(Datasets { train, heldout })
    }

    pub fn gen_data(&self, force: bool) -> Result<StageOutput> {
        let outputs = self.data_files();
        self.begin(Stage::GenData, &outputs, force)?;
        let data = generate_data(&self.config)?;
        let dir = self.dir.join("data");
        let by_task = |eps: &[Episode], t: TaskId| eps.iter().filter(|e| e.task == t).cloned().collect::<Vec<_>>();
        let mut counts = Vec::new();
        for &t in &self.config.tasks {
            let train = by_task(&data.train, t);
            let heldout = by_task(&data.heldout, t);
            write_dataset(&dir, &format!("{}_train", t.name()), &train, self.config.seed_for("train-data"))?;
            write_dataset(&dir, &format!("{}_heldout", t.name()), &heldout, self.config.seed_for("heldout-data"))?;
            counts.push(format!("{t}: {} train / {} held-out episodes", train.len(), heldout.len()));
        }
        self.finish(Stage::GenData, outputs, counts.join("; "))
    }

    pub fn train_dynamics(&self, force: bool) -> Result<StageOutput> {
        let (ckpt, csv) = (self.ckpt("dynamics"), self.metrics("dynamics"));
        self.begin(Stage::TrainDynamics, &[ckpt.clone(), csv.clone()], force)?;
        let data = self.load_data()?;
        let (model, metrics) = fit_dynamics(&self.config, &data)?;
        save_dynamics(&ckpt, &model, self.config.dynamics.steps as u64)?;
        write_rows(&csv, &["step", "loss", "heldout_mse", "ctrl_gap"], &metrics)?;
        let summary = metrics
            .last()
            .map(|m| format!("heldout_mse {:.5}, ctrl_gap {:.4}", m.heldout_mse, m.ctrl_gap))
            .unwrap_or_default();
        self.finish(Stage::TrainDynamics, vec![ckpt, csv], summary)
    }

    pub fn train_value(&self, force: bool) -> Result<StageOutput> {
        let (ckpt, csv) = (self.ckpt("value"), self.metrics("value"));
        self.begin(Stage::TrainValue, &[ckpt.clone(), csv.clone()], force)?;
        let data = self.load_data()?;
        let (model, metrics) = fit_value(&self.config, &data)?;
        let steps = self.config.value.phase1_steps + self.config.value.phase2_steps;
        save_value(&ckpt, &model, steps as u64)?;
        write_rows(&csv, &["step", "L_prog", "L_TD", "heldout_spearman", "success_failure_margin"], &metrics)?;
        let summary = metrics
            .last()
            .map(|m| format!("heldout_spearman {:.3}, margin {:.3}", m.heldout_spearman, m.success_failure_margin))
            .unwrap_or_default();
        self.finish(Stage::TrainValue, vec![ckpt, csv], summary)
    }

    pub fn warmup(&self, force: bool) -> Result<StageOutput> {
        let (ckpt, csv) = (self.ckpt("policy_warmup"), self.metrics("policy_warmup"));
        self.begin(Stage::Warmup, &[ckpt.clone(), csv.clone()], force)?;
        let data = self.load_data()?;
        let value = load_value(&self.ckpt("value"))?;
        let warm = fit_warmup(&self.config, &data.train, &value)?;
        save_policy(&ckpt, &warm.policy, self.config.policy.warmup_steps as u64)?;
        write_rows(&csv, &["step", "loss"], &warm.metrics)?;
        let b = warm.policy.binning;
        let summary = format!("{} records, bins {} over [{:.4}, {:.4}]", warm.dataset.len(), b.n_bins(), b.lo(), b.hi());
        self.finish(Stage::Warmup, vec![ckpt, csv], summary)
    }

    fn top_bin_results(&self, policy: &Policy, episodes: usize) -> Result<ArmResult> {
        evaluate_arm(policy, &self.config.tasks, policy.binning.n_bins(), episodes, self.config.seed_for("eval"))
    }

    pub fn improve(&self, force: bool) -> Result<StageOutput> {
        let c = &self.config;
        let iter_ckpts: Vec<PathBuf> = (1..=c.improve.iterations).map(|k| self.ckpt(&format!("policy_iter_{k:03}"))).collect();
        let mut outputs = vec![self.ckpt("policy_improved"), self.ckpt("policy_rollout"), self.metrics("loop")];
        if c.eval.loop_episodes > 0 {
            outputs.push(self.metrics("loop_eval"));
        }
        outputs.extend(iter_ckpts.iter().cloned());
        self.begin(Stage::Improve, &outputs, force)?;
        let data = self.load_data()?;
        let dynamics = load_dynamics(&self.ckpt("dynamics"))?;
        let value = load_value(&self.ckpt("value"))?;
        let warm = load_policy(&self.ckpt("policy_warmup"))?;
        let dataset = warmup_dataset(&data.train, &value, &warm)?;
        let out = run_improve(&c.improve, &dynamics, &value, &warm, &dataset, &data.train, c.seed_for("loop"))?;

        for (k, (snap, path)) in out.snapshots.iter().zip(&iter_ckpts).enumerate() {
            save_policy(path, snap, ((k + 1) * c.improve.train_steps) as u64)?;
        }
        let total = (c.improve.iterations * c.improve.train_steps) as u64;
        save_policy(&self.ckpt("policy_improved"), &out.policy, total)?;
        save_policy(&self.ckpt("policy_rollout"), &out.rollout_policy, total)?;

        let mut curve = Vec::new();
        if c.eval.loop_episodes > 0 {
            curve.push(self.top_bin_results(&warm, c.eval.loop_episodes)?);
            for s in &out.snapshots {
                curve.push(self.top_bin_results(s, c.eval.loop_episodes)?);
            }
        }
        let mut w = csv_writer(&self.metrics("loop"))?;
        w.write_record(["iteration", "buffer_size", "mean_advantage", "train_loss", "eval_success", "eval_score"])?;
        for m in &out.metrics {
            let (s, sc) = curve
                .get(m.iteration)
                .map(|r| {
                    let mean = r.mean();
                    (mean.success_rate.to_string(), mean.mean_score.to_string())
                })
                .unwrap_or_default();
            w.write_record([
                m.iteration.to_string(),
                m.buffer_size.to_string(),
                m.mean_advantage.to_string(),
                m.train_loss.to_string(),
                s,
                sc,
            ])?;
        }
        w.flush()?;
        if c.eval.loop_episodes > 0 {
            let mut w = csv_writer(&self.metrics("loop_eval"))?;
            w.write_record(["iteration", "task", "success_rate", "mean_score", "episodes"])?;
            for (it, r) in curve.iter().enumerate() {
                for (t, rs) in &r.per_task {
                    w.write_record([
                        it.to_string(),
                        t.name().to_string(),
                        rs.success_rate.to_string(),
                        rs.mean_score.to_string(),
                        c.eval.loop_episodes.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
        let summary = match (curve.first(), curve.last()) {
            (Some(a), Some(b)) if curve.len() > 1 => format!(
                "top-bin success {:.3} -> {:.3} over {} iterations",
                a.mean().success_rate,
                b.mean().success_rate,
                c.improve.iterations
            ),
            _ => format!("{} iterations", c.improve.iterations),
        };
        self.finish(Stage::Improve, outputs, summary)
    }

    /// Evaluates a policy checkpoint in the simulator. Only the policy is loaded.
    pub fn eval(&self, checkpoint: Option<&Path>, force: bool) -> Result<(StageOutput, EvaluationReport)> {
        let path = match checkpoint {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Config(format!("checkpoint {} not found", p.display())));
                }
                p.to_path_buf()
            }
            None => {
                let p = self.ckpt("policy_improved");
                if !p.exists() {
                    return Err(Error::Dependency { artifact: p.display().to_string(), command: Stage::Improve.command().into() });
                }
                p
            }
        };
        let stem = path.file_stem().map_or_else(|| "policy".into(), |s| s.to_string_lossy().into_owned());
        let (json, csv) = (self.dir.join("eval").join(format!("{stem}.json")), self.dir.join("eval").join(format!("{stem}.csv")));
        self.begin(Stage::Eval, &[json.clone(), csv.clone()], force)?;
        let report = evaluate_checkpoint(&path, &self.config.tasks, self.config.eval.episodes, self.config.seed_for("eval"))?;
        fs::create_dir_all(self.dir.join("eval"))?;
        fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(&csv, report.to_csv()?)?;
        let summary = report
            .tasks
            .iter()
            .map(|t| format!("{}: success {:.3}, score {:.2}", t.task, t.success_rate, t.mean_score))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((self.finish(Stage::Eval, vec![json, csv], summary)?, report))
    }

    pub fn ablate(&self, axis: AblationAxis, force: bool) -> Result<StageOutput> {
        let c = &self.config;
        let csv = self.dir.join("ablate").join(format!("{}.csv", axis.name()));
        self.begin(Stage::Ablate, &[csv.clone()], force)?;
        if axis == AblationAxis::Bins && !self.ckpt("policy_improved").exists() {
            return Err(Error::Dependency {
                artifact: self.ckpt("policy_improved").display().to_string(),
                command: Stage::Improve.command().into(),
            });
        }
        let data = self.load_data()?;
        let dynamics = load_dynamics(&self.ckpt("dynamics"))?;
        let value = load_value(&self.ckpt("value"))?;
        let warm = load_policy(&self.ckpt("policy_warmup"))?;
        let dataset = warmup_dataset(&data.train, &value, &warm)?;
        let improved = if axis == AblationAxis::Bins { Some(load_policy(&self.ckpt("policy_improved"))?) } else { None };

        let mut header = vec![
            "arm".to_string(),
            "offline_ratio".into(),
            "use_online_actions".into(),
            "use_online_states".into(),
            "bin".into(),
            "success_rate".into(),
            "mean_score".into(),
        ];
        for t in &c.tasks {
            header.push(format!("{}_success", t.name()));
            header.push(format!("{}_score", t.name()));
        }
        let mut w = csv_writer(&csv)?;
        w.write_record(&header)?;
        let mut lines = Vec::new();
        for arm in ablation_arms(axis, &c.improve, warm.binning.n_bins()) {
            let (lc, result, bin) = match (&arm.loop_config, arm.bin, &improved) {
                (Some(lc), _, _) => {
                    let out = run_improve(lc, &dynamics, &value, &warm, &dataset, &data.train, c.seed_for("loop"))?;
                    let bin = out.policy.binning.n_bins();
                    (lc.clone(), self.top_bin_results(&out.policy, c.eval.episodes)?, bin)
                }
                (None, Some(bin), Some(p)) => {
                    let r = evaluate_arm(p, &c.tasks, bin, c.eval.episodes, c.seed_for("eval"))?;
                    (c.improve.clone(), r, bin)
                }
                _ => unreachable!("bin arms exist only on the bins axis"),
            };
            let mean = result.mean();
            let mut row = vec![
                arm.name.clone(),
                lc.offline_ratio.to_string(),
                lc.use_online_actions.to_string(),
                lc.use_online_states.to_string(),
                bin.to_string(),
                mean.success_rate.to_string(),
                mean.mean_score.to_string(),
            ];
            for (_, r) in &result.per_task {
                row.push(r.success_rate.to_string());
                row.push(r.mean_score.to_string());
            }
            w.write_record(&row)?;
            lines.push(format!("{}: {:.3}", arm.name, mean.success_rate));
        }
        w.flush()?;
        drop(w);
        self.finish(Stage::Ablate, vec![csv], lines.join("; "))
    }
}

/// Simulator-only evaluation of a policy checkpoint.
pub fn evaluate_checkpoint(path: &Path, tasks: &[TaskId], episodes: usize, seed: u64) -> Result<EvaluationReport> {
    let policy = load_policy(path)?;
    evaluate(&policy, tasks, episodes, seed)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(csv::WriterBuilder::new().has_headers(false).from_path(path)?)
}

/// Header first, so that an empty series still yields a well-formed file.
fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
