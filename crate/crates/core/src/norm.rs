//! Per-task observation normalization and action scaling shared by every
//! learned component. Observations of all tasks are padded to a common width.

use serde::{Deserialize, Serialize};

use crate::domain::{ActionChunk, Episode, Observation, TaskId};
use crate::env::TaskSpec;
use crate::error::{Error, Result};

/// Dimensions whose training std falls below this are left unscaled.
const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    /// Padded observation width.
    pub dim: usize,
    /// Indexed by task, each of length `dim`.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl ObsNormalizer {
    pub fn identity() -> Self {
        let dim = TaskSpec::max_obs_dim();
        let n = TaskId::count();
        ObsNormalizer {
            dim,
            mean: vec![vec![0.0; dim]; n],
            std: vec![vec![1.0; dim]; n],
        }
    }

    /// Per-task z-score statistics over every frame (terminal included).
    pub fn fit(episodes: &[Episode]) -> Self {
        let mut norm = Self::identity();
        for task in TaskId::ALL {
            let d = TaskSpec::get(task).d_o;
            let frames: Vec<&Observation> = episodes
                .iter()
                .filter(|e| e.task == task)
                .flat_map(|e| e.frames())
                .collect();
            if frames.is_empty() {
                continue;
            }
            let n = frames.len() as f64;
            let k = task.index();
            for j in 0..d {
                let mean = frames.iter().map(|f| f.values()[j]).sum::<f64>() / n;
                let var = frames.iter().map(|f| (f.values()[j] - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                norm.mean[k][j] = mean;
                norm.std[k][j] = if std < MIN_STD { 1.0 } else { std };
            }
        }
        norm
    }

    pub fn validate(&self) -> Result<()> {
        let n = TaskId::count();
        if self.mean.len() != n || self.std.len() != n {
            return Err(Error::shape("normalizer tasks", n, self.mean.len()));
        }
        for (m, s) in self.mean.iter().zip(&self.std) {
            if m.len() != self.dim || s.len() != self.dim {
                return Err(Error::shape("normalizer width", self.dim, m.len()));
            }
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("normalizer std must be positive and finite".into()));
            }
        }
        Ok(())
    }

    /// Normalized, zero-padded copy of `obs`.
    pub fn normalize(&self, obs: &Observation, task: TaskId) -> Result<Vec<f64>> {
        let d = TaskSpec::get(task).d_o;
        if obs.dim() != d {
            return Err(Error::shape("observation", d, obs.dim()));
        }
        let k = task.index();
        let mut z = vec![0.0; self.dim];
        for (j, &v) in obs.values().iter().enumerate() {
            z[j] = (v - self.mean[k][j]) / self.std[k][j];
        }
        Ok(z)
    }

    pub fn normalize_into(&self, obs: &Observation, task: TaskId, out: &mut Vec<f64>) -> Result<()> {
        out.extend(self.normalize(obs, task)?);
        Ok(())
    }

    /// Inverse of [`normalize`](Self::normalize); padding is dropped.
    pub fn denormalize(&self, z: &[f64], task: TaskId) -> Result<Observation> {
        if z.len() != self.dim {
            return Err(Error::shape("normalized observation", self.dim, z.len()));
        }
        let spec = TaskSpec::get(task);
        let k = task.index();
        let values = (0..spec.d_o)
            .map(|j| z[j] * self.std[k][j] + self.mean[k][j])
            .collect();
        Observation::new(values, spec.layout.clone())
    }
}

/// Padded action width shared by the learned components.
pub fn action_width() -> usize {
    TaskSpec::max_action_dim()
}

/// Maps a chunk into `[-1, 1]` per dimension using the task bounds, padding rows
/// to [`action_width`].
pub fn chunk_to_unit(chunk: &ActionChunk, task: TaskId) -> Result<Vec<f64>> {
    let spec = TaskSpec::get(task);
    if chunk.action_dim() != spec.d_a {
        return Err(Error::shape("chunk action dim", spec.d_a, chunk.action_dim()));
    }
    let w = action_width();
    let mut out = vec![0.0; chunk.horizon() * w];
    for (r, row) in chunk.rows().enumerate() {
        for (k, &a) in row.iter().enumerate() {
            let (lo, hi) = (spec.bounds.lo[k], spec.bounds.hi[k]);
            out[r * w + k] = 2.0 * (a - lo) / (hi - lo) - 1.0;
        }
    }
    Ok(out)
}

/// Inverse of [`chunk_to_unit`], clamped to the task bounds.
pub fn unit_to_chunk(unit: &[f64], horizon: usize, task: TaskId) -> Result<ActionChunk> {
    let spec = TaskSpec::get(task);
    let w = action_width();
    if unit.len() != horizon * w {
        return Err(Error::shape("unit chunk", horizon * w, unit.len()));
    }
    let mut data = Vec::with_capacity(horizon * spec.d_a);
    for r in 0..horizon {
        for k in 0..spec.d_a {
            let (lo, hi) = (spec.bounds.lo[k], spec.bounds.hi[k]);
            let u = unit[r * w + k].clamp(-1.0, 1.0);
            data.push(lo + (u + 1.0) * 0.5 * (hi - lo));
        }
    }
    ActionChunk::new(horizon, spec.d_a, data)
}
