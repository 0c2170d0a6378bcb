use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::TaskId;
use crate::dynamics::DynamicsConfig;
use crate::env::DatasetSpec;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::selfimprove::LoopConfig;
use crate::value::ValueConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: DatasetSpec,
    pub heldout: DatasetSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: DatasetSpec::default(),
            heldout: DatasetSpec {
                n_expert: 10,
                n_rollout: 5,
                n_fail: 5,
                n_correction: 0,
                noise_levels: vec![0.3],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvantageConfig {
    pub n_bins: usize,
    /// Bin edges sit at this quantile and its complement of the offline labels.
    pub calibration_quantile: f64,
    /// Keep offline rollout labels out of the top bin.
    pub reserve_top_bin: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        AdvantageConfig { n_bins: 10, calibration_quantile: 0.0, reserve_top_bin: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Episodes per task and bin for `eval` and `ablate`.
    pub episodes: usize,
    /// Episodes per task for the per-iteration curve of `improve`; 0 disables it.
    pub loop_episodes: usize,
    /// Step stride of the controllability probes on held-out episodes.
    pub probe_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 100, loop_episodes: 50, probe_stride: 10 }
    }
}

/// One experiment: every stage reads its block from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: Vec<TaskId>,
    pub data: DataConfig,
    pub dynamics: DynamicsConfig,
    pub value: ValueConfig,
    pub policy: PolicyConfig,
    pub advantage: AdvantageConfig,
    #[serde(rename = "loop")]
    pub improve: LoopConfig,
    pub eval: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            tasks: TaskId::ALL.to_vec(),
            data: DataConfig::default(),
            dynamics: DynamicsConfig::default(),
            value: ValueConfig::default(),
            policy: PolicyConfig::default(),
            advantage: AdvantageConfig::default(),
            improve: LoopConfig::default(),
            eval: EvalConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        if self.tasks.iter().collect::<BTreeSet<_>>().len() != self.tasks.len() {
            return Err(Error::Config("task list has duplicates".into()));
        }
        let d = &self.data.train;
        if d.n_expert == 0 {
            return Err(Error::Config("training data needs expert episodes".into()));
        }
        if self.value.phase2_steps > 0 && d.n_rollout + d.n_fail == 0 {
            return Err(Error::Config("TD training needs rollout or failure episodes".into()));
        }
        if self.data.heldout.n_expert == 0 {
            return Err(Error::Config("held-out data needs expert episodes".into()));
        }
        for s in [&self.data.train, &self.data.heldout] {
            if s.noise_levels.iter().any(|l| !(0.0..=2.0).contains(l)) {
                return Err(Error::Config("noise levels must lie in [0, 2]".into()));
            }
        }
        self.dynamics.validate()?;
        self.value.validate()?;
        self.policy.validate()?;
        self.improve.validate()?;
        if self.advantage.n_bins == 0 {
            return Err(Error::Config("advantage n_bins must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.advantage.calibration_quantile) {
            return Err(Error::Config("calibration_quantile must lie in [0, 0.5)".into()));
        }
        if self.eval.episodes == 0 || self.eval.probe_stride == 0 {
            return Err(Error::Config("eval episodes and probe_stride must be positive".into()));
        }
        Ok(())
    }

    /// Canonical serialization; the output directory is not part of the experiment.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        serde_json::to_string(&c).expect("config serializes")
    }

    /// Content hash framed like a git blob, over the canonical serialization.
    pub fn hash(&self) -> String {
        let body = self.canonical_json();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn seed_for(&self, stage: &str) -> u64 {
        crate::seeding::derive(self.seed, &[crate::seeding::tag(stage)])
    }
}
