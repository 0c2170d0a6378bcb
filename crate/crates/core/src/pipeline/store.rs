//! Model checkpoints: the network goes into the `.apx` body, everything needed
//! to rebuild the model around it into the header's `meta`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::approx::{load_checkpoint, save_checkpoint, Approximator, CheckpointHeader, FlowHead};
use crate::domain::AdvantageBinning;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::norm::ObsNormalizer;
use crate::policy::Policy;
use crate::value::ValueModel;

pub const DYNAMICS_KIND: &str = "dynamics";
pub const VALUE_KIND: &str = "value";
pub const POLICY_KIND: &str = "policy";

#[derive(Serialize, Deserialize)]
struct DynamicsMeta {
    n_hist: usize,
    sigma_ctx: f64,
    horizon: usize,
    norm: ObsNormalizer,
}

#[derive(Serialize, Deserialize)]
struct ValueMeta {
    gamma: f64,
    norm: ObsNormalizer,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    cond_dim: usize,
    horizon: usize,
    action_dim: usize,
    n_integration_steps: usize,
    binning: AdvantageBinning,
    norm: ObsNormalizer,
}

fn save<M: Serialize>(path: &Path, kind: &str, step: u64, net: &Approximator, meta: M) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        layer_sizes: net.layer_sizes().to_vec(),
        step,
        meta: serde_json::to_value(meta)?,
    };
    save_checkpoint(path, &header, net)
}

fn load<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(CheckpointHeader, Approximator, M)> {
    let (header, net) = load_checkpoint(path)?;
    if header.kind != kind {
        return Err(Error::Decode {
            field: "kind",
            reason: format!("{} holds a {} checkpoint, expected {kind}", path.display(), header.kind),
        });
    }
    let meta = serde_json::from_value(header.meta.clone()).map_err(|e| Error::Decode {
        field: "meta",
        reason: format!("{}: {e}", path.display()),
    })?;
    Ok((header, net, meta))
}

pub fn save_dynamics(path: &Path, model: &DynamicsModel, step: u64) -> Result<()> {
    let meta = DynamicsMeta {
        n_hist: model.n_hist,
        sigma_ctx: model.sigma_ctx,
        horizon: model.horizon,
        norm: model.norm.clone(),
    };
    save(path, DYNAMICS_KIND, step, &model.net, meta)
}

pub fn load_dynamics(path: &Path) -> Result<DynamicsModel> {
    let (_, net, m) = load::<DynamicsMeta>(path, DYNAMICS_KIND)?;
    DynamicsModel::from_parts(net, m.n_hist, m.sigma_ctx, m.horizon, m.norm)
}

pub fn save_value(path: &Path, model: &ValueModel, step: u64) -> Result<()> {
    save(path, VALUE_KIND, step, &model.net, ValueMeta { gamma: model.gamma, norm: model.norm.clone() })
}

pub fn load_value(path: &Path) -> Result<ValueModel> {
    let (_, net, m) = load::<ValueMeta>(path, VALUE_KIND)?;
    ValueModel::from_parts(net, m.gamma, m.norm)
}

pub fn save_policy(path: &Path, policy: &Policy, step: u64) -> Result<()> {
    let h = &policy.head;
    let meta = PolicyMeta {
        cond_dim: h.cond_dim,
        horizon: h.horizon,
        action_dim: h.action_dim,
        n_integration_steps: h.n_integration_steps,
        binning: policy.binning,
        norm: policy.norm.clone(),
    };
    save(path, POLICY_KIND, step, &h.net, meta)
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    let (_, net, m) = load::<PolicyMeta>(path, POLICY_KIND)?;
    let head = FlowHead::from_net(net, m.cond_dim, m.horizon, m.action_dim, m.n_integration_steps)?;
    Policy::from_parts(head, m.binning, m.norm)
}
