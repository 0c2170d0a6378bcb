//! Ground-truth synthetic tasks. These stand in for the real world: they are
//! used to generate offline data and for final evaluation only.

pub mod belt;
pub mod latch;

use std::cell::Cell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ActionBounds, ActionChunk, Episode, Observation, Outcome, Source, Step, TaskId, ViewLayout};
use crate::error::{Error, Result};
use crate::seeding;

pub use belt::BeltState;
pub use latch::LatchState;

/// Chunk length shared by both tasks.
pub const HORIZON: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum Rubric {
    /// Points per item for grasping and for correct placement, scaled so a full clear is `max`.
    PerItem { grasp: f64, place: f64, n_items: usize, max: f64 },
    /// Cumulative score reached at each milestone.
    Milestones(Vec<(&'static str, f64)>),
}

impl Rubric {
    pub fn max_score(&self) -> f64 {
        match self {
            Rubric::PerItem { max, .. } => *max,
            Rubric::Milestones(m) => m.last().map_or(0.0, |&(_, s)| s),
        }
    }

    /// Sum of the unscaled rubric points over every sub-goal, after scaling.
    pub fn total_points(&self) -> f64 {
        match self {
            Rubric::PerItem { grasp, place, n_items, max } => {
                let raw = (grasp + place) * *n_items as f64;
                raw * (max / raw)
            }
            Rubric::Milestones(m) => m.last().map_or(0.0, |&(_, s)| s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task: TaskId,
    pub d_o: usize,
    pub d_a: usize,
    pub horizon: usize,
    pub max_steps: usize,
    pub bounds: ActionBounds,
    pub idle_action: Vec<f64>,
    pub layout: Arc<ViewLayout>,
    pub rubric: Rubric,
}

impl TaskSpec {
    pub fn get(task: TaskId) -> &'static TaskSpec {
        static SPECS: std::sync::OnceLock<Vec<TaskSpec>> = std::sync::OnceLock::new();
        &SPECS.get_or_init(|| TaskId::ALL.iter().map(|&t| TaskSpec::build(t)).collect())[task.index()]
    }

    fn build(task: TaskId) -> TaskSpec {
        match task {
            TaskId::BeltSort => TaskSpec {
                task,
                d_o: belt::OBS_DIM,
                d_a: 3,
                horizon: HORIZON,
                max_steps: belt::MAX_STEPS,
                bounds: ActionBounds {
                    lo: vec![-belt::MOVE_CAP, -belt::MOVE_CAP, 0.0],
                    hi: vec![belt::MOVE_CAP, belt::MOVE_CAP, 1.0],
                },
                idle_action: vec![0.0, 0.0, 0.0],
                layout: belt::layout(),
                rubric: Rubric::PerItem {
                    grasp: 1.0,
                    place: 1.5,
                    n_items: belt::N_ITEMS,
                    max: 10.0,
                },
            },
            TaskId::LatchClose => TaskSpec {
                task,
                d_o: latch::OBS_DIM,
                d_a: latch::N_JOINTS,
                horizon: HORIZON,
                max_steps: latch::MAX_STEPS,
                bounds: ActionBounds {
                    lo: vec![-latch::MOVE_CAP; latch::N_JOINTS],
                    hi: vec![latch::MOVE_CAP; latch::N_JOINTS],
                },
                idle_action: vec![0.0; latch::N_JOINTS],
                layout: latch::layout(),
                rubric: Rubric::Milestones(
                    latch::STAGE_NAMES
                        .iter()
                        .copied()
                        .zip(latch::STAGE_SCORES)
                        .collect(),
                ),
            },
        }
    }

    /// Largest observation dimension over the registered tasks.
    pub fn max_obs_dim() -> usize {
        TaskId::ALL.iter().map(|&t| Self::get(t).d_o).max().unwrap_or(0)
    }

    pub fn max_action_dim() -> usize {
        TaskId::ALL.iter().map(|&t| Self::get(t).d_a).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Grasp { item: usize },
    Deposit { item: usize, correct: bool },
    Drop { item: usize },
    Lost { item: usize },
    StageComplete { stage: usize },
    Deformation { joint: usize },
}

/// Seeded deviations from the scripted expert used to produce failure data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    /// Carry the item (or every item when `None`) to the other bin.
    WrongBin { item: Option<usize> },
    /// Scale motion by `gain`, planning as if unscaled.
    GainPerturbation { gain: f64 },
    /// Open the gripper once within `at_distance` of the bin but outside it.
    PrematureRelease { item: usize, at_distance: f64 },
    /// Abandon the active joint once it passes `at_q` and drive `joint` instead.
    WrongOrder { joint: usize, at_q: f64 },
    /// Stop after the given number of milestones.
    PrematureStop { after_stage: usize },
}

impl Corruption {
    pub fn sample(task: TaskId, rng: &mut impl Rng) -> Corruption {
        match task {
            TaskId::BeltSort => match rng.gen_range(0..3) {
                0 => Corruption::WrongBin {
                    item: Some(rng.gen_range(0..belt::N_ITEMS)),
                },
                1 => Corruption::GainPerturbation {
                    gain: rng.gen_range(0.3..0.6),
                },
                _ => Corruption::PrematureRelease {
                    item: rng.gen_range(0..belt::N_ITEMS),
                    at_distance: rng.gen_range(0.1..0.35),
                },
            },
            TaskId::LatchClose => match rng.gen_range(0..3) {
                0 => Corruption::GainPerturbation {
                    gain: rng.gen_range(0.25..0.5),
                },
                1 => Corruption::WrongOrder {
                    joint: rng.gen_range(1..latch::N_JOINTS),
                    at_q: rng.gen_range(0.3..0.8),
                },
                _ => Corruption::PrematureStop {
                    after_stage: rng.gen_range(0..latch::N_STAGES - 1),
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    Belt(BeltState),
    Latch(LatchState),
}

thread_local! {
    static STEP_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`step`] calls made on the current thread.
pub fn step_calls() -> u64 {
    STEP_CALLS.with(Cell::get)
}

impl EnvState {
    pub fn task(&self) -> TaskId {
        match self {
            EnvState::Belt(_) => TaskId::BeltSort,
            EnvState::Latch(_) => TaskId::LatchClose,
        }
    }

    pub fn spec(&self) -> &'static TaskSpec {
        TaskSpec::get(self.task())
    }

    pub fn observe(&self) -> Observation {
        match self {
            EnvState::Belt(s) => belt::observe(s),
            EnvState::Latch(s) => latch::observe(s),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            EnvState::Belt(s) => belt::is_done(s),
            EnvState::Latch(s) => latch::is_done(s),
        }
    }

    pub fn step_index(&self) -> usize {
        match self {
            EnvState::Belt(s) => s.step,
            EnvState::Latch(s) => s.step,
        }
    }

    /// Rubric score of the state reached so far.
    pub fn score(&self) -> f64 {
        match self {
            EnvState::Belt(s) => {
                let Rubric::PerItem { grasp, place, n_items, max } = &self.spec().rubric else {
                    unreachable!("belt uses a per-item rubric")
                };
                let scale = max / ((grasp + place) * *n_items as f64);
                let raw = grasp * belt::grasp_count(s) as f64 + place * belt::correct_count(s) as f64;
                (raw * scale).min(*max)
            }
            EnvState::Latch(s) => match latch::stages_complete(s) {
                0 => 0.0,
                k => latch::STAGE_SCORES[k - 1],
            },
        }
    }

    pub fn is_success(&self) -> bool {
        match self {
            EnvState::Belt(s) => belt::all_correct(s),
            EnvState::Latch(s) => s.stages[latch::N_STAGES - 1],
        }
    }

    /// One step without touching the instrumentation counter (expert planning).
    fn advance(&self, action: &[f64], events: &mut Vec<Event>) -> EnvState {
        let mut a = action.to_vec();
        self.spec().bounds.clamp(&mut a);
        match self {
            EnvState::Belt(s) => EnvState::Belt(belt::step(s, &a, events)),
            EnvState::Latch(s) => EnvState::Latch(latch::step(s, &a, events)),
        }
    }
}

pub fn reset(task: TaskId, seed: u64) -> (EnvState, Observation) {
    let state = match task {
        TaskId::BeltSort => EnvState::Belt(belt::reset(seed)),
        TaskId::LatchClose => EnvState::Latch(latch::reset(seed)),
    };
    let obs = state.observe();
    (state, obs)
}

/// Advances the simulator by one action row; out-of-bounds actions are clamped.
pub fn step(state: &EnvState, action: &[f64]) -> Result<(EnvState, Observation, Vec<Event>)> {
    STEP_CALLS.with(|c| c.set(c.get() + 1));
    if state.is_done() {
        return Err(Error::State(format!(
            "{} episode already terminated at step {}",
            state.task(),
            state.step_index()
        )));
    }
    let spec = state.spec();
    if action.len() != spec.d_a {
        return Err(Error::shape("action", spec.d_a, action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::RejectedInput("action is not finite".into()));
    }
    let mut events = Vec::new();
    let next = state.advance(action, &mut events);
    let obs = next.observe();
    Ok((next, obs, events))
}

fn expert_row(state: &EnvState, corruption: Option<&Corruption>) -> Vec<f64> {
    match state {
        EnvState::Belt(s) => belt::expert_action(s, corruption).to_vec(),
        EnvState::Latch(s) => latch::expert_action(s, corruption).to_vec(),
    }
}

/// The scripted expert's next chunk, planned by simulating `H` steps ahead.
/// Rows after the episode would end hold the idle action.
pub fn scripted_expert(state: &EnvState, corruption: Option<&Corruption>) -> ActionChunk {
    let spec = state.spec();
    let mut rows = Vec::with_capacity(spec.horizon);
    let mut s = state.clone();
    let mut events = Vec::new();
    for _ in 0..spec.horizon {
        if s.is_done() {
            rows.push(spec.idle_action.clone());
            continue;
        }
        let a = expert_row(&s, corruption);
        s = s.advance(&a, &mut events);
        rows.push(a);
    }
    ActionChunk::from_rows(&rows).expect("expert chunk is well formed")
}

/// Runs one episode, executing each chunk open-loop and re-observing between chunks.
/// `controller` receives the state, observation and chunk index.
pub fn run_episode<C>(task: TaskId, seed: u64, mut controller: C) -> Result<Episode>
where
    C: FnMut(&EnvState, &Observation, usize) -> Result<ActionChunk>,
{
    let spec = TaskSpec::get(task);
    let (mut state, mut obs) = reset(task, seed);
    let mut frames = Vec::new();
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut chunk_index = 0;
    while !state.is_done() {
        let chunk = controller(&state, &obs, chunk_index)?;
        if chunk.action_dim() != spec.d_a {
            return Err(Error::shape("controller chunk", spec.d_a, chunk.action_dim()));
        }
        for row in chunk.rows() {
            if state.is_done() {
                break;
            }
            let mut a = row.to_vec();
            spec.bounds.clamp(&mut a);
            let (next, next_obs, _) = step(&state, &a)?;
            frames.push(obs);
            actions.push(a);
            state = next;
            obs = next_obs;
        }
        chunk_index += 1;
    }
    let steps = frames
        .into_iter()
        .enumerate()
        .map(|(t, o)| {
            let rows: Vec<Vec<f64>> = (t..t + spec.horizon)
                .map(|k| actions.get(k).cloned().unwrap_or_else(|| spec.idle_action.clone()))
                .collect();
            Step {
                obs: o,
                chunk: ActionChunk::from_rows(&rows).expect("window of executed actions"),
            }
        })
        .collect();
    let success = state.is_success();
    Ok(Episode {
        task,
        steps,
        terminal: obs,
        source: if success {
            Source::RolloutSuccess
        } else {
            Source::RolloutFailure
        },
        outcome: if success { Outcome::Success } else { Outcome::Failure },
        score: state.score(),
        seed,
    })
}

/// Replays the executed actions of an episode from its seed, checking every
/// observation bit-exactly, and returns the final state.
pub fn replay(episode: &Episode) -> Result<EnvState> {
    let (mut state, first) = reset(episode.task, episode.seed);
    if episode.steps.first().map(|s| &s.obs) != Some(&first) {
        return Err(Error::State("episode does not start at its seeded reset".into()));
    }
    for (t, s) in episode.steps.iter().enumerate() {
        if state.is_done() {
            return Err(Error::State(format!("episode continues past termination at step {t}")));
        }
        let (next, obs, _) = step(&state, s.chunk.row(0))?;
        if &obs != episode.frame(t + 1) {
            return Err(Error::State(format!("replay diverges at step {}", t + 1)));
        }
        state = next;
    }
    if !state.is_done() {
        return Err(Error::State("episode is incomplete".into()));
    }
    Ok(state)
}

/// Simulator state before step `t` of a recorded episode, rebuilt from its seed.
/// Uses the uninstrumented transition, like expert planning.
pub fn state_at(episode: &Episode, t: usize) -> Result<EnvState> {
    if t > episode.horizon() {
        return Err(Error::Index { index: t, len: episode.horizon() + 1 });
    }
    let (mut state, _) = reset(episode.task, episode.seed);
    let mut events = Vec::new();
    for s in &episode.steps[..t] {
        state = state.advance(s.chunk.row(0), &mut events);
    }
    Ok(state)
}

/// Executes a chunk open-loop from `state` without counting steps, returning the
/// observations after each row (the last one repeats once the episode ends).
pub fn simulate_chunk(state: &EnvState, chunk: &ActionChunk) -> Vec<Observation> {
    let mut s = state.clone();
    let mut events = Vec::new();
    chunk
        .rows()
        .map(|row| {
            if !s.is_done() {
                s = s.advance(row, &mut events);
            }
            s.observe()
        })
        .collect()
}

pub fn score(episode: &Episode) -> Result<f64> {
    Ok(replay(episode)?.score())
}

pub fn is_success(episode: &Episode) -> Result<bool> {
    Ok(replay(episode)?.is_success())
}

/// Episode counts and noise for one task's offline dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_expert: usize,
    /// Noisy-expert executions, labelled by outcome.
    pub n_rollout: usize,
    /// Corrupted-expert executions.
    pub n_fail: usize,
    /// Corrupted start, then the expert takes over.
    pub n_correction: usize,
    /// Action noise (fraction of the half range), cycled over noisy rollouts.
    pub noise_levels: Vec<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_expert: 20,
            n_rollout: 20,
            n_fail: 20,
            n_correction: 5,
            noise_levels: vec![0.2, 0.4],
        }
    }
}

fn add_noise(chunk: &ActionChunk, spec: &TaskSpec, level: f64, rng: &mut ChaCha8Rng) -> ActionChunk {
    if level <= 0.0 {
        return chunk.clone();
    }
    let rows: Vec<Vec<f64>> = chunk
        .rows()
        .map(|r| {
            let mut a: Vec<f64> = r
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let half = 0.5 * (spec.bounds.hi[k] - spec.bounds.lo[k]);
                    let n = Normal::new(0.0, level * half).expect("positive std");
                    v + n.sample(rng)
                })
                .collect();
            spec.bounds.clamp(&mut a);
            a
        })
        .collect();
    ActionChunk::from_rows(&rows).expect("noisy chunk is well formed")
}

const MAX_EXPERT_ATTEMPTS: u64 = 50;

/// Builds one task's offline dataset: expert demonstrations, noisy rollouts,
/// corrupted failures and corrections, each labelled with source, outcome and score.
pub fn generate_dataset(task: TaskId, spec: &DatasetSpec, seed: u64) -> Result<Vec<Episode>> {
    let task_spec = TaskSpec::get(task);
    let base = seeding::derive(seed, &[seeding::tag(task.name())]);
    let mut out = Vec::new();

    for i in 0..spec.n_expert as u64 {
        let mut found = None;
        for attempt in 0..MAX_EXPERT_ATTEMPTS {
            let env_seed = seeding::derive(base, &[seeding::tag("expert"), i, attempt]);
            let e = run_episode(task, env_seed, |s, _, _| Ok(scripted_expert(s, None)))?;
            if e.is_success() {
                found = Some(e);
                break;
            }
        }
        let mut e = found.ok_or_else(|| Error::State(format!("scripted expert never succeeded on {task}")))?;
        e.source = Source::Expert;
        out.push(e);
    }

    for i in 0..spec.n_rollout as u64 {
        let env_seed = seeding::derive(base, &[seeding::tag("rollout"), i]);
        let level = if spec.noise_levels.is_empty() {
            0.0
        } else {
            spec.noise_levels[i as usize % spec.noise_levels.len()]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(env_seed, &[1]));
        let e = run_episode(task, env_seed, |s, _, _| Ok(add_noise(&scripted_expert(s, None), task_spec, level, &mut rng)))?;
        out.push(e);
    }

    for i in 0..spec.n_fail as u64 {
        let env_seed = seeding::derive(base, &[seeding::tag("fail"), i]);
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(env_seed, &[1]));
        let c = Corruption::sample(task, &mut rng);
        let e = run_episode(task, env_seed, |s, _, _| Ok(scripted_expert(s, Some(&c))))?;
        out.push(e);
    }

    for i in 0..spec.n_correction as u64 {
        let env_seed = seeding::derive(base, &[seeding::tag("correction"), i]);
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(env_seed, &[1]));
        let c = Corruption::sample(task, &mut rng);
        let takeover = rng.gen_range(1..4);
        let mut e = run_episode(task, env_seed, |s, _, k| {
            Ok(if k < takeover {
                scripted_expert(s, Some(&c))
            } else {
                scripted_expert(s, None)
            })
        })?;
        if e.is_success() {
            e.source = Source::Correction;
        }
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rubric_totals_are_ten() {
        for t in TaskId::ALL {
            let r = &TaskSpec::get(t).rubric;
            assert!((r.total_points() - 10.0).abs() < 1e-12);
            assert_eq!(r.max_score(), 10.0);
        }
    }

    #[test]
    fn same_seed_same_reset() {
        for t in TaskId::ALL {
            assert_eq!(reset(t, 17).1, reset(t, 17).1);
        }
    }

    #[test]
    fn stepping_a_finished_episode_is_a_state_error() {
        let mut state = EnvState::Latch(latch::reset(0));
        if let EnvState::Latch(s) = &mut state {
            s.step = latch::MAX_STEPS;
        }
        assert!(matches!(step(&state, &[0.0; 3]), Err(Error::State(_))));
    }

    #[test]
    fn observations_match_the_task_layout() {
        for t in TaskId::ALL {
            let spec = TaskSpec::get(t);
            let e = run_episode(t, 3, |s, _, _| Ok(scripted_expert(s, None))).unwrap();
            for f in e.frames() {
                assert_eq!(f.dim(), spec.d_o);
                assert_eq!(f.layout(), &spec.layout);
            }
        }
    }

    #[test]
    fn latch_two_stages_score_five() {
        let mut s = latch::reset(0);
        s.stages = [true, true, false, false];
        assert_eq!(EnvState::Latch(s).score(), 5.0);
    }

    #[test]
    fn step_calls_are_counted() {
        let before = step_calls();
        let (s, _) = reset(TaskId::BeltSort, 0);
        step(&s, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(step_calls(), before + 1);
    }
}
