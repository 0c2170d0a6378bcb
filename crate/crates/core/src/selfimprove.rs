//! The self-improving loop: imagined rollouts scored by the value model, a
//! FIFO online buffer, mixed offline/online flow training and an EMA rollout
//! policy. Nothing here has access to the ground-truth environment.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::Adam;
use crate::domain::{window_history, ActionChunk, Episode, Observation, ObservationHistory, TaskId};
use crate::dynamics::{cosine_lr, DynamicsModel};
use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::norm::unit_to_chunk;
use crate::policy::{flow_record, flow_step, FlowRecord, Policy};
use crate::seeding;
use crate::value::{advantage_from_values, ValueModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub iterations: usize,
    pub ema_decay: f64,
    pub offline_ratio: f64,
    pub use_online_actions: bool,
    pub use_online_states: bool,
    /// Initial states imagined per iteration.
    pub rollout_batch: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    /// Synchronize the rollout policy after every optimizer step instead of
    /// once per training stage.
    pub ema_every_step: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 10,
            ema_decay: 0.995,
            offline_ratio: 0.6,
            use_online_actions: true,
            use_online_states: true,
            rollout_batch: 256,
            train_steps: 200,
            batch_size: 64,
            buffer_capacity: 4096,
            lr: 1e-4,
            min_lr_ratio: 0.1,
            weight_decay: 0.0,
            ema_every_step: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.offline_ratio) {
            return Err(Error::Config(format!("offline_ratio {} outside [0, 1]", self.offline_ratio)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("loop batch_size, buffer_capacity and lr must be positive".into()));
        }
        Ok(())
    }
}

/// One imagined interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSample {
    pub obs: Observation,
    pub task: TaskId,
    pub chunk: ActionChunk,
    pub advantage: f64,
    pub bin: usize,
    /// 0 for the first chunk from a pool state, 1 for the chained chunk.
    pub depth: u8,
}

/// Bounded FIFO of rollout samples.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineBuffer {
    capacity: usize,
    items: VecDeque<RolloutSample>,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        OnlineBuffer { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting oldest first. Samples deeper than one chained chunk are rejected.
    pub fn push(&mut self, s: RolloutSample) -> Result<()> {
        if s.depth > 1 {
            return Err(Error::RejectedInput(format!("rollout depth {} exceeds 1", s.depth)));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(s);
        Ok(())
    }

    pub fn extend(&mut self, samples: impl IntoIterator<Item = RolloutSample>) -> Result<()> {
        for s in samples {
            self.push(s)?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &RolloutSample> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&RolloutSample> {
        self.items.get(i)
    }
}

/// A start state for imagination: a step of an offline episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolState {
    pub episode: usize,
    pub t: usize,
}

/// Every chunk-boundary step of every episode.
pub fn initial_state_pool(episodes: &[Episode], horizon: usize) -> Vec<PoolState> {
    let mut pool = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        for t in (0..e.horizon()).step_by(horizon.max(1)) {
            pool.push(PoolState { episode: i, t });
        }
    }
    pool
}

fn check_compatible(policy: &Policy, dynamics: &DynamicsModel, value: &ValueModel) -> Result<()> {
    if policy.horizon() != dynamics.horizon {
        return Err(Error::Config(format!(
            "policy horizon {} differs from dynamics horizon {}",
            policy.horizon(),
            dynamics.horizon
        )));
    }
    if policy.norm.dim != dynamics.norm.dim || value.norm.dim != dynamics.norm.dim {
        return Err(Error::Config("policy, dynamics and value observation widths differ".into()));
    }
    Ok(())
}

fn offline_chunk(e: &Episode, t: usize) -> ActionChunk {
    match e.steps.get(t) {
        Some(s) => s.chunk.clone(),
        None => {
            let spec = TaskSpec::get(e.task);
            ActionChunk::from_rows(&vec![spec.idle_action.clone(); spec.horizon]).expect("idle chunk")
        }
    }
}

struct Frontier {
    task: TaskId,
    history: ObservationHistory,
    offline: ActionChunk,
}

/// Imagines one or two chunks from each pool state and scores them.
pub fn rollout_stage(
    policy: &Policy,
    dynamics: &DynamicsModel,
    value: &ValueModel,
    episodes: &[Episode],
    pool: &[PoolState],
    config: &LoopConfig,
    seed: u64,
) -> Result<Vec<RolloutSample>> {
    check_compatible(policy, dynamics, value)?;
    let n_bins = policy.binning.n_bins();
    let horizon = dynamics.horizon;
    let mut frontier = Vec::with_capacity(pool.len());
    for p in pool {
        let e = episodes.get(p.episode).ok_or(Error::Index { index: p.episode, len: episodes.len() })?;
        frontier.push(Frontier {
            task: e.task,
            history: window_history(e, p.t, dynamics.n_hist)?,
            offline: offline_chunk(e, p.t),
        });
    }
    let depths = if config.use_online_states { 2 } else { 1 };
    let mut by_depth: Vec<Vec<RolloutSample>> = Vec::new();
    for depth in 0..depths {
        let obs: Vec<Observation> = frontier.iter().map(|f| f.history.current().clone()).collect();
        let chunks: Vec<ActionChunk> = if config.use_online_actions {
            let conds = frontier
                .iter()
                .zip(&obs)
                .map(|(f, o)| policy.condition_vector(n_bins, o, f.task))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = (0..frontier.len() as u64).map(|i| seeding::derive(seed, &[depth, i])).collect();
            let u = policy.sample_unit_batch(&conds, &seeds)?;
            frontier
                .iter()
                .enumerate()
                .map(|(i, f)| unit_to_chunk(u.row(i).as_slice().expect("contiguous row"), horizon, f.task))
                .collect::<Result<Vec<_>>>()?
        } else {
            frontier.iter().map(|f| f.offline.clone()).collect()
        };
        let mut enc = Vec::with_capacity(frontier.len());
        for (f, c) in frontier.iter().zip(&chunks) {
            enc.push(dynamics.encode(&f.history, c, f.task)?);
        }
        let rows: Vec<_> = enc.iter().zip(&frontier).map(|((c, a), f)| (&c[..], &a[..], f.task)).collect();
        let z = dynamics.predict_encoded_batch(&rows)?;
        let mut preds = Vec::with_capacity(frontier.len());
        let mut xs = Vec::with_capacity(frontier.len() * (horizon + 1));
        for (i, f) in frontier.iter().enumerate() {
            let frames = dynamics.decode_frames(z.row(i).as_slice().expect("contiguous row"), f.task)?;
            xs.push(value.encode(&obs[i], f.task)?);
            for fr in &frames {
                xs.push(value.encode(fr, f.task)?);
            }
            preds.push(frames);
        }
        let v = value.value_batch(&xs)?;
        let mut samples = Vec::with_capacity(frontier.len());
        for (i, f) in frontier.iter().enumerate() {
            let vi = &v[i * (horizon + 1)..(i + 1) * (horizon + 1)];
            let a = advantage_from_values(vi[0], &vi[1..]);
            samples.push(RolloutSample {
                obs: obs[i].clone(),
                task: f.task,
                chunk: chunks[i].clone(),
                advantage: a,
                bin: policy.binning.discretize(a)?,
                depth: depth as u8,
            });
        }
        by_depth.push(samples);
        if depth + 1 < depths {
            for (i, (f, p)) in frontier.iter_mut().zip(&pool[..]).enumerate() {
                f.history = f.history.advanced(&preds[i]);
                f.offline = offline_chunk(&episodes[p.episode], p.t + horizon);
            }
        }
    }
    // Depth-0 and depth-1 samples of the same pool state stay adjacent.
    let mut out = Vec::with_capacity(pool.len() * depths as usize);
    let mut iters: Vec<_> = by_depth.into_iter().map(|d| d.into_iter()).collect();
    for _ in 0..pool.len() {
        for it in iters.iter_mut() {
            out.push(it.next().expect("one sample per state and depth"));
        }
    }
    Ok(out)
}

/// Offline and online counts in a batch of `batch_size` at offline ratio `rho`.
pub fn mix_counts(rho: f64, batch_size: usize) -> (usize, usize) {
    let off = ((rho * batch_size as f64).ceil() as usize).min(batch_size);
    (off, batch_size - off)
}

/// Draws one mixed batch of indices: offline first, then online.
pub fn draw_mixed(rng: &mut impl Rng, n_offline: usize, n_online: usize, rho: f64, batch_size: usize) -> (Vec<usize>, Vec<usize>) {
    let (k_off, k_on) = mix_counts(rho, batch_size);
    let off = if n_offline == 0 { Vec::new() } else { (0..k_off).map(|_| rng.gen_range(0..n_offline)).collect() };
    let on = if n_online == 0 { Vec::new() } else { (0..k_on).map(|_| rng.gen_range(0..n_online)).collect() };
    (off, on)
}

/// Train-time RNG shared by warm-up and training stages so that `rho = 1`
/// reproduces warm-up exactly.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[seeding::tag("policy-train")]))
}

/// Mixed offline/online flow training. Online samples are conditioned on their
/// evaluated bins. `lr_at(step)` gives the learning rate; `after_step` runs after
/// every optimizer step. Returns the per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn training_stage<F>(
    behavior: &mut Policy,
    opt: &mut Adam,
    buffer: &OnlineBuffer,
    offline: &[FlowRecord],
    rho: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
    lr_at: impl Fn(usize) -> f64,
    mut after_step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&Policy) -> Result<()>,
{
    let (k_off, k_on) = mix_counts(rho, batch_size);
    if k_on > 0 && buffer.is_empty() {
        return Err(Error::Config("online buffer is empty but the offline ratio is below 1".into()));
    }
    if k_off > 0 && offline.is_empty() {
        return Err(Error::Config("offline dataset is empty but the offline ratio is above 0".into()));
    }
    let online = buffer
        .iter()
        .map(|s| {
            if policy_bin_mismatch(behavior, s)? {
                return Err(Error::State("buffer sample bin disagrees with its advantage".into()));
            }
            flow_record(behavior, s.bin, &s.obs, s.task, &s.chunk)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = training_rng(seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        opt.config.lr = lr_at(step);
        let (off, on) = draw_mixed(&mut rng, offline.len(), online.len(), rho, batch_size);
        let batch: Vec<&FlowRecord> = off.iter().map(|&i| &offline[i]).chain(on.iter().map(|&i| &online[i])).collect();
        losses.push(flow_step(behavior, opt, &batch, &mut rng)?);
        after_step(behavior)?;
    }
    Ok(losses)
}

fn policy_bin_mismatch(policy: &Policy, s: &RolloutSample) -> Result<bool> {
    Ok(policy.binning.discretize(s.advantage)? != s.bin)
}

/// `rollout ← decay·rollout + (1 − decay)·behavior`, elementwise.
pub fn ema_update(rollout: &mut [f64], behavior: &[f64], decay: f64) -> Result<()> {
    if rollout.len() != behavior.len() {
        return Err(Error::shape("ema parameters", rollout.len(), behavior.len()));
    }
    for (r, b) in rollout.iter_mut().zip(behavior) {
        *r = decay * *r + (1.0 - decay) * b;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub buffer_size: usize,
    pub mean_advantage: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct LoopOutput {
    /// The trained behavior policy.
    pub policy: Policy,
    pub rollout_policy: Policy,
    /// Behavior policy after each iteration.
    pub snapshots: Vec<Policy>,
    pub metrics: Vec<IterationMetrics>,
}

/// Runs the loop from a warm policy. Both the behavior and the rollout policy
/// start as copies of it.
#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    config: &LoopConfig,
    dynamics: &DynamicsModel,
    value: &ValueModel,
    warm: &Policy,
    offline: &[FlowRecord],
    episodes: &[Episode],
    pool: &[PoolState],
    seed: u64,
) -> Result<LoopOutput> {
    config.validate()?;
    check_compatible(warm, dynamics, value)?;
    if pool.is_empty() && config.iterations > 0 {
        return Err(Error::Config("initial-state pool is empty".into()));
    }
    let mut behavior = warm.clone();
    let mut rollout = warm.clone();
    let mut opt = Adam::new(
        crate::approx::AdamConfig { lr: config.lr, weight_decay: config.weight_decay, ..Default::default() },
        behavior.head.net.n_params(),
    );
    let mut buffer = OnlineBuffer::new(config.buffer_capacity);
    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    let total = config.iterations * config.train_steps;
    for it in 0..config.iterations {
        let wrap = |e: Error| match e {
            Error::State(m) => Error::State(format!("iteration {it}: {m}")),
            Error::Config(m) => Error::Config(format!("iteration {it}: {m}")),
            other => other,
        };
        let iseed = seeding::derive(seed, &[it as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(iseed, &[seeding::tag("pool")]));
        let starts: Vec<PoolState> = (0..config.rollout_batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let samples = rollout_stage(&rollout, dynamics, value, episodes, &starts, config, seeding::derive(iseed, &[seeding::tag("rollout")]))
            .map_err(wrap)?;
        let mean_advantage = samples.iter().map(|s| s.advantage).sum::<f64>() / samples.len().max(1) as f64;
        buffer.extend(samples).map_err(wrap)?;
        let base = it * config.train_steps;
        let rollout_ref = &mut rollout;
        let losses = training_stage(
            &mut behavior,
            &mut opt,
            &buffer,
            offline,
            config.offline_ratio,
            config.train_steps,
            config.batch_size,
            seeding::derive(iseed, &[seeding::tag("train")]),
            |s| cosine_lr(config.lr, config.min_lr_ratio, base + s, total),
            |b| {
                if config.ema_every_step {
                    ema_update(rollout_ref.head.net.params_mut(), b.head.net.params(), config.ema_decay)?;
                }
                Ok(())
            },
        )
        .map_err(wrap)?;
        if !config.ema_every_step {
            ema_update(rollout.head.net.params_mut(), behavior.head.net.params(), config.ema_decay).map_err(wrap)?;
        }
        metrics.push(IterationMetrics {
            iteration: it + 1,
            buffer_size: buffer.len(),
            mean_advantage,
            train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        });
        snapshots.push(behavior.clone());
    }
    Ok(LoopOutput { policy: behavior, rollout_policy: rollout, snapshots, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_counts_reference() {
        assert_eq!(mix_counts(0.6, 64), (39, 25));
        assert_eq!(mix_counts(1.0, 64), (64, 0));
        assert_eq!(mix_counts(0.0, 64), (0, 64));
    }

    #[test]
    fn ema_reference_values() {
        let mut r = vec![1.0];
        ema_update(&mut r, &[0.0], 0.995).unwrap();
        assert_eq!(r, vec![0.995]);
        let mut r = vec![0.3, -2.0];
        ema_update(&mut r, &[5.0, 7.0], 1.0).unwrap();
        assert_eq!(r, vec![0.3, -2.0]);
        assert!(matches!(ema_update(&mut r, &[1.0], 0.5), Err(Error::Shape { .. })));
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let spec = TaskSpec::get(TaskId::LatchClose);
        let obs = Observation::new(vec![0.0; spec.d_o], spec.layout.clone()).unwrap();
        let chunk = ActionChunk::from_rows(&vec![vec![0.0; 3]; 5]).unwrap();
        let mut b = OnlineBuffer::new(3);
        for i in 0..5 {
            b.push(RolloutSample { obs: obs.clone(), task: TaskId::LatchClose, chunk: chunk.clone(), advantage: i as f64, bin: 1, depth: 0 }).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter().map(|s| s.advantage).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        let deep = RolloutSample { obs, task: TaskId::LatchClose, chunk, advantage: 0.0, bin: 1, depth: 2 };
        assert!(b.push(deep).is_err());
    }
}
