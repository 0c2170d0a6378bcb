//! Stage computations on in-memory data. The run-directory commands wrap these.

use std::str::FromStr;

use crate::domain::{Episode, TaskId};
use crate::dynamics::{build_transitions, gap_probes, train_dynamics, DynamicsMetrics, DynamicsModel};
use crate::env::{generate_dataset, DatasetSpec, HORIZON};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, RateScore};
use crate::norm::ObsNormalizer;
use crate::policy::{calibrated_binning, encode_warmup, warmup_train, Policy, WarmupDataset, WarmupMetrics};
use crate::selfimprove::{initial_state_pool, run_loop, LoopConfig, LoopOutput};
use crate::value::{label_offline_rollouts, train_value, ValueMetrics, ValueModel};

use super::config::RunConfig;

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<Episode>,
    pub heldout: Vec<Episode>,
}

pub fn generate_split(tasks: &[TaskId], spec: &DatasetSpec, seed: u64) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for &t in tasks {
        out.extend(generate_dataset(t, spec, seed)?);
    }
    Ok(out)
}

pub fn generate_data(config: &RunConfig) -> Result<Datasets> {
    Ok(Datasets {
        train: generate_split(&config.tasks, &config.data.train, config.seed_for("train-data"))?,
        heldout: generate_split(&config.tasks, &config.data.heldout, config.seed_for("heldout-data"))?,
    })
}

pub fn fit_dynamics(config: &RunConfig, data: &Datasets) -> Result<(DynamicsModel, Vec<DynamicsMetrics>)> {
    let norm = ObsNormalizer::fit(&data.train);
    let mut model = DynamicsModel::new(norm, &config.dynamics, HORIZON, config.seed_for("dynamics-init"))?;
    let train = build_transitions(&model, &data.train)?;
    let heldout = build_transitions(&model, &data.heldout)?;
    let probes = gap_probes(&data.heldout, model.n_hist, config.eval.probe_stride)?;
    let metrics = train_dynamics(&mut model, &train, &heldout, &probes, &config.dynamics, config.seed_for("dynamics"))?;
    Ok((model, metrics))
}

pub fn fit_value(config: &RunConfig, data: &Datasets) -> Result<(ValueModel, Vec<ValueMetrics>)> {
    let norm = ObsNormalizer::fit(&data.train);
    let mut model = ValueModel::new(norm, &config.value, config.seed_for("value-init"))?;
    let metrics = train_value(&mut model, &data.train, &data.heldout, &config.value, config.seed_for("value"))?;
    Ok((model, metrics))
}

/// Offline records labelled by the value model and binned with `policy`'s binning.
pub fn warmup_dataset(train: &[Episode], value: &ValueModel, policy: &Policy) -> Result<WarmupDataset> {
    let labels = label_offline_rollouts(value, train, policy.horizon())?;
    WarmupDataset::build(train, &labels, &policy.binning)
}

#[derive(Debug, Clone)]
pub struct WarmStart {
    pub policy: Policy,
    pub dataset: WarmupDataset,
    pub metrics: Vec<WarmupMetrics>,
}

pub fn fit_warmup(config: &RunConfig, train: &[Episode], value: &ValueModel) -> Result<WarmStart> {
    let labels = label_offline_rollouts(value, train, HORIZON)?;
    let binning = calibrated_binning(
        &labels,
        config.advantage.n_bins,
        config.advantage.calibration_quantile,
        config.advantage.reserve_top_bin,
    )?;
    let dataset = WarmupDataset::build(train, &labels, &binning)?;
    let norm = ObsNormalizer::fit(train);
    let mut policy = Policy::new(norm, binning, HORIZON, &config.policy, config.seed_for("policy-init"))?;
    let metrics = warmup_train(&mut policy, &dataset, &config.policy, config.policy.warmup_steps, config.seed_for("warmup"))?;
    Ok(WarmStart { policy, dataset, metrics })
}

/// Runs the self-improving loop from a warm policy; every arm of a sweep shares `seed`.
pub fn improve(
    loop_config: &LoopConfig,
    dynamics: &DynamicsModel,
    value: &ValueModel,
    warm: &Policy,
    dataset: &WarmupDataset,
    train: &[Episode],
    seed: u64,
) -> Result<LoopOutput> {
    let offline = encode_warmup(warm, dataset)?;
    let pool = initial_state_pool(train, warm.horizon());
    run_loop(loop_config, dynamics, value, warm, &offline, train, &pool, seed)
}

/// Per-task results of one policy at one bin, plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub per_task: Vec<(TaskId, RateScore)>,
}

impl ArmResult {
    pub fn mean(&self) -> RateScore {
        let n = self.per_task.len().max(1) as f64;
        RateScore {
            success_rate: self.per_task.iter().map(|(_, r)| r.success_rate).sum::<f64>() / n,
            mean_score: self.per_task.iter().map(|(_, r)| r.mean_score).sum::<f64>() / n,
        }
    }

    pub fn task(&self, task: TaskId) -> Option<RateScore> {
        self.per_task.iter().find(|(t, _)| *t == task).map(|(_, r)| *r)
    }
}

pub fn evaluate_arm(policy: &Policy, tasks: &[TaskId], bin: usize, episodes: usize, seed: u64) -> Result<ArmResult> {
    let mut per_task = Vec::new();
    for &t in tasks {
        per_task.push((t, evaluate_policy(policy, t, bin, episodes, seed)?));
    }
    Ok(ArmResult { per_task })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    OfflineRatio,
    OnlineToggles,
    Bins,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [AblationAxis::OfflineRatio, AblationAxis::OnlineToggles, AblationAxis::Bins];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::OfflineRatio => "offline-ratio",
            AblationAxis::OnlineToggles => "online-toggles",
            AblationAxis::Bins => "bins",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}` (expected offline-ratio, online-toggles or bins)")))
    }
}

pub const OFFLINE_RATIOS: [f64; 4] = [0.1, 0.3, 0.6, 0.9];

/// (use_online_actions, use_online_states) arms.
pub const ONLINE_TOGGLES: [(bool, bool); 3] = [(false, false), (true, false), (true, true)];

/// One sweep arm. Loop arms carry a modified loop config and are evaluated at the
/// top bin; bin arms evaluate the improved policy at a fixed bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub loop_config: Option<LoopConfig>,
    pub bin: Option<usize>,
}

pub fn ablation_arms(axis: AblationAxis, base: &LoopConfig, n_bins: usize) -> Vec<Arm> {
    let flag = |b: bool| if b { "on" } else { "off" };
    match axis {
        AblationAxis::OfflineRatio => OFFLINE_RATIOS
            .iter()
            .map(|&rho| Arm {
                name: format!("rho={rho}"),
                loop_config: Some(LoopConfig { offline_ratio: rho, ..base.clone() }),
                bin: None,
            })
            .collect(),
        AblationAxis::OnlineToggles => ONLINE_TOGGLES
            .iter()
            .map(|&(a, s)| Arm {
                name: format!("actions={},states={}", flag(a), flag(s)),
                loop_config: Some(LoopConfig { use_online_actions: a, use_online_states: s, ..base.clone() }),
                bin: None,
            })
            .collect(),
        AblationAxis::Bins => {
            let mut bins = vec![1, n_bins.div_ceil(2), n_bins];
            bins.dedup();
            bins.into_iter()
                .map(|b| Arm { name: format!("bin={b}"), loop_config: None, bin: Some(b) })
                .collect()
        }
    }
}
