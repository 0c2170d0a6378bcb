//! Experiment plumbing: run configuration, run directories, checkpoints and the
//! stage commands behind the `rise` binary.

mod config;
mod experiment;
mod run;
mod store;

pub use config::{AdvantageConfig, DataConfig, EvalConfig, RunConfig};
pub use experiment::{
    ablation_arms, evaluate_arm, fit_dynamics, fit_value, fit_warmup, generate_data, generate_split, improve, warmup_dataset,
    AblationAxis, Arm, ArmResult, Datasets, WarmStart, OFFLINE_RATIOS, ONLINE_TOGGLES,
};
pub use run::{evaluate_checkpoint, Run, RunManifest, Stage, StageOutput, StageRecord, RUN_ROOT_ENV};
pub use store::{load_dynamics, load_policy, load_value, save_dynamics, save_policy, save_value};
