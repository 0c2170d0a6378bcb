//! Domain types shared by every stage: observations, action chunks, episodes,
//! advantage binning, history windows and the on-disk dataset format.

mod binning;
pub mod codec;
mod history;

pub use binning::{AdvantageBinning, OptimalAdvantage};
pub use history::{window_frames, window_history, ObservationHistory};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous block of an observation vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Partition of an observation vector into view blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewLayout {
    spans: Vec<ViewSpan>,
}

impl ViewLayout {
    /// Builds a layout from `(name, len)` blocks laid out back to back.
    pub fn contiguous(blocks: &[(&str, usize)]) -> Self {
        let mut start = 0;
        let spans = blocks
            .iter()
            .map(|&(name, len)| {
                let span = ViewSpan {
                    name: name.to_string(),
                    start,
                    len,
                };
                start += len;
                span
            })
            .collect();
        ViewLayout { spans }
    }

    /// Validates that `spans` are disjoint, ordered, and cover `[0, dim)`.
    pub fn new(spans: Vec<ViewSpan>) -> Result<Self> {
        let mut cursor = 0;
        for span in &spans {
            if span.start != cursor || span.len == 0 {
                return Err(Error::RejectedInput(format!(
                    "view span `{}` does not continue the partition at {cursor}",
                    span.name
                )));
            }
            cursor += span.len;
        }
        Ok(ViewLayout { spans })
    }

    pub fn spans(&self) -> &[ViewSpan] {
        &self.spans
    }

    pub fn dim(&self) -> usize {
        self.spans.last().map_or(0, |s| s.start + s.len)
    }

    pub fn span(&self, name: &str) -> Option<&ViewSpan> {
        self.spans.iter().find(|s| s.name == name)
    }
}

/// A fixed-dimension real feature vector split into named views.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: Vec<f64>,
    layout: Arc<ViewLayout>,
}

impl Observation {
    pub fn new(values: Vec<f64>, layout: Arc<ViewLayout>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::shape("observation", layout.dim(), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::RejectedInput(format!(
                "observation entry {i} is not finite"
            )));
        }
        Ok(Observation { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<ViewLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Slice of the named view block.
    pub fn view(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .span(name)
            .map(|s| &self.values[s.start..s.start + s.len])
    }
}

/// Per-dimension inclusive action bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionBounds {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, action: &mut [f64]) {
        for ((a, &lo), &hi) in action.iter_mut().zip(&self.lo).zip(&self.hi) {
            *a = a.clamp(lo, hi);
        }
    }

    pub fn contains(&self, action: &[f64]) -> bool {
        action
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(a, (lo, hi))| a >= lo && a <= hi)
    }
}

/// `H` consecutive low-level actions, stored row-major (`H × d_a`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    action_dim: usize,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if horizon == 0 || action_dim == 0 {
            return Err(Error::RejectedInput(
                "action chunk needs H >= 1 and d_a >= 1".into(),
            ));
        }
        if data.len() != horizon * action_dim {
            return Err(Error::shape("action chunk", horizon * action_dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("action chunk entry is not finite".into()));
        }
        Ok(ActionChunk {
            horizon,
            action_dim,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let action_dim = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), action_dim, data)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.action_dim..(k + 1) * self.action_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.action_dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn within(&self, bounds: &ActionBounds) -> bool {
        bounds.dim() == self.action_dim && self.rows().all(|r| bounds.contains(r))
    }
}

/// Registered task identifiers. The instruction is an enumerated task code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    BeltSort,
    LatchClose,
}

impl TaskId {
    pub const ALL: [TaskId; 2] = [TaskId::BeltSort, TaskId::LatchClose];

    pub fn index(self) -> usize {
        match self {
            TaskId::BeltSort => 0,
            TaskId::LatchClose => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::UnknownTask(format!("#{i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::BeltSort => "belt-sort",
            TaskId::LatchClose => "latch-close",
        }
    }

    pub fn count() -> usize {
        Self::ALL.len()
    }

    /// One-hot code over the registered task table.
    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![0.0; Self::count()];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    RolloutSuccess,
    RolloutFailure,
    Correction,
}

impl Source {
    /// Sources that receive the optimal advantage token instead of a learned label.
    pub fn is_demonstration(self) -> bool {
        matches!(self, Source::Expert | Source::Correction)
    }

    pub fn is_rollout(self) -> bool {
        matches!(self, Source::RolloutSuccess | Source::RolloutFailure)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Source::Expert => 0,
            Source::RolloutSuccess => 1,
            Source::RolloutFailure => 2,
            Source::Correction => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Source::Expert,
            1 => Source::RolloutSuccess,
            2 => Source::RolloutFailure,
            3 => Source::Correction,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// One environment step: the observation and the `H` actions executed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub chunk: ActionChunk,
}

/// A recorded trajectory. `steps[t].chunk.row(0)` is the action executed at `t`;
/// rows past the end of the episode hold the task's idle action.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: TaskId,
    pub steps: Vec<Step>,
    pub terminal: Observation,
    pub source: Source,
    pub outcome: Outcome,
    pub score: f64,
    pub seed: u64,
}

impl Episode {
    /// Horizon `T`: number of stepped observations.
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Observation at index `t` in `0..=T` (index `T` is the terminal frame).
    pub fn frame(&self, t: usize) -> &Observation {
        if t == self.steps.len() {
            &self.terminal
        } else {
            &self.steps[t].obs
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = &Observation> {
        self.steps.iter().map(|s| &s.obs).chain(std::iter::once(&self.terminal))
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Checks the structural invariants: non-empty, source/outcome agreement,
    /// equal dimensions everywhere.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::RejectedInput("episode has no steps".into()));
        }
        if self.source == Source::Expert && self.outcome != Outcome::Success {
            return Err(Error::RejectedInput(
                "expert episodes must be successful".into(),
            ));
        }
        if !(self.score.is_finite() && self.score >= 0.0) {
            return Err(Error::RejectedInput("episode score must be >= 0".into()));
        }
        let d_o = self.terminal.dim();
        let (h, d_a) = (self.steps[0].chunk.horizon(), self.steps[0].chunk.action_dim());
        for s in &self.steps {
            if s.obs.dim() != d_o {
                return Err(Error::shape("episode observation", d_o, s.obs.dim()));
            }
            if s.chunk.horizon() != h || s.chunk.action_dim() != d_a {
                return Err(Error::shape("episode chunk", h * d_a, s.chunk.as_flat().len()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ViewLayout> {
        Arc::new(ViewLayout::contiguous(&[("proprio", 2), ("scene", 3)]))
    }

    #[test]
    fn layout_covers_vector() {
        let l = layout();
        assert_eq!(l.dim(), 5);
        assert_eq!(l.span("scene").unwrap().start, 2);
        let bad = ViewLayout::new(vec![ViewSpan {
            name: "a".into(),
            start: 1,
            len: 2,
        }]);
        assert!(bad.is_err());
    }

    #[test]
    fn observation_rejects_non_finite_and_bad_dims() {
        assert!(Observation::new(vec![0.0; 4], layout()).is_err());
        assert!(Observation::new(vec![0.0, 1.0, f64::NAN, 0.0, 0.0], layout()).is_err());
        let o = Observation::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], layout()).unwrap();
        assert_eq!(o.view("proprio").unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn chunk_shape_checks() {
        assert!(ActionChunk::new(0, 2, vec![]).is_err());
        assert!(ActionChunk::new(2, 2, vec![0.0; 3]).is_err());
        let c = ActionChunk::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.row(1), &[3.0, 4.0]);
        let bounds = ActionBounds {
            lo: vec![0.0, 0.0],
            hi: vec![4.0, 4.0],
        };
        assert!(c.within(&bounds));
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(t.name().parse::<TaskId>().unwrap(), t);
            assert_eq!(TaskId::from_index(t.index()).unwrap(), t);
        }
        assert!("backpack".parse::<TaskId>().is_err());
    }
}
