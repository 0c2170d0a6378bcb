//! Ground-truth evaluation: chunks are executed open-loop and the simulator is
//! re-observed between chunks. Only the policy is needed, never the world model.

use serde::{Deserialize, Serialize};

use crate::domain::{ActionChunk, Observation, TaskId};
use crate::env::{run_episode, EnvState};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateScore {
    pub success_rate: f64,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinResult {
    pub bin: usize,
    pub success_rate: f64,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    /// Prompted with the optimal token.
    pub success_rate: f64,
    pub mean_score: f64,
    pub per_bin: Vec<BinResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub episodes: usize,
    pub tasks: Vec<TaskReport>,
}

impl EvaluationReport {
    pub fn task(&self, task: TaskId) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task.name())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "bin", "success_rate", "mean_score", "episodes", "seed"])?;
        for t in &self.tasks {
            for b in &t.per_bin {
                w.write_record([
                    t.task.clone(),
                    b.bin.to_string(),
                    b.success_rate.to_string(),
                    b.mean_score.to_string(),
                    self.episodes.to_string(),
                    self.seed.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Environment seed of evaluation episode `i`; shared by every policy and bin
/// so that comparisons are paired.
pub fn episode_seed(seed: u64, task: TaskId, i: usize) -> u64 {
    seeding::derive(seed, &[seeding::tag("eval"), task.index() as u64, i as u64])
}

/// Success rate and mean score of an arbitrary chunk controller.
pub fn evaluate_controller<C>(task: TaskId, episodes: usize, seed: u64, mut controller: C) -> Result<RateScore>
where
    C: FnMut(&EnvState, &Observation, u64, usize) -> Result<ActionChunk>,
{
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let (mut wins, mut score) = (0usize, 0.0);
    for i in 0..episodes {
        let es = episode_seed(seed, task, i);
        let e = run_episode(task, es, |s, o, k| controller(s, o, es, k))?;
        wins += e.is_success() as usize;
        score += e.score;
    }
    Ok(RateScore {
        success_rate: wins as f64 / episodes as f64,
        mean_score: score / episodes as f64,
    })
}

/// Runs `policy` prompted with `bin` on fresh seeded episodes.
pub fn evaluate_policy(policy: &Policy, task: TaskId, bin: usize, episodes: usize, seed: u64) -> Result<RateScore> {
    policy.binning.check_bin(bin)?;
    evaluate_controller(task, episodes, seed, |_, o, es, k| {
        policy.sample(bin, o, task, seeding::derive(es, &[seeding::tag("policy"), k as u64]))
    })
}

/// Bins reported per task: lowest, middle and the optimal token.
pub fn report_bins(policy: &Policy) -> Vec<usize> {
    let b = &policy.binning;
    let mut bins = vec![1, b.mid_bin(), b.n_bins()];
    bins.dedup();
    bins
}

pub fn evaluate(policy: &Policy, tasks: &[TaskId], episodes: usize, seed: u64) -> Result<EvaluationReport> {
    let mut out = Vec::new();
    for &task in tasks {
        let mut per_bin = Vec::new();
        for bin in report_bins(policy) {
            let r = evaluate_policy(policy, task, bin, episodes, seed)?;
            per_bin.push(BinResult { bin, success_rate: r.success_rate, mean_score: r.mean_score });
        }
        let top = per_bin.last().expect("at least one bin").clone();
        out.push(TaskReport {
            task: task.name().to_string(),
            success_rate: top.success_rate,
            mean_score: top.mean_score,
            per_bin,
        });
    }
    Ok(EvaluationReport { seed, episodes, tasks: out })
}
