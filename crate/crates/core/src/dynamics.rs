//! Learned controllable dynamics: predicts the next `H` observations from an
//! observation history and a candidate chunk in one forward pass.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::{gradient, Adam, AdamConfig, Approximator};
use crate::domain::{window_history, ActionChunk, Episode, Observation, ObservationHistory, TaskId};
use crate::env::{simulate_chunk, state_at, TaskSpec};
use crate::error::{Error, Result};
use crate::norm::{action_width, chunk_to_unit, ObsNormalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub n_hist: usize,
    pub sigma_ctx: f64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub k_tasks: usize,
    pub steps: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f64,
    pub eval_every: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            n_hist: 2,
            sigma_ctx: 0.2,
            hidden: vec![128, 128],
            batch_size: 64,
            k_tasks: 1,
            steps: 12000,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            eval_every: 1000,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hist == 0 || self.batch_size == 0 || self.k_tasks == 0 {
            return Err(Error::Config("dynamics n_hist, batch_size and k_tasks must be positive".into()));
        }
        if !(self.sigma_ctx >= 0.0) || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("dynamics sigma_ctx, lr or min_lr_ratio out of range".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to `lr * min_ratio` over `total` steps.
pub fn cosine_lr(lr: f64, min_ratio: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = (step as f64 / (total - 1) as f64).min(1.0);
    lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// A training example in model space: normalized context frames, unit-scaled
/// chunk and normalized targets, all padded to the shared widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub task: TaskId,
    pub context: Vec<f64>,
    pub chunk: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub net: Approximator,
    pub n_hist: usize,
    pub sigma_ctx: f64,
    pub horizon: usize,
    pub norm: ObsNormalizer,
}

impl DynamicsModel {
    fn layer_sizes(norm: &ObsNormalizer, n_hist: usize, horizon: usize, hidden: &[usize]) -> Vec<usize> {
        let input = n_hist * norm.dim + horizon * action_width() + TaskId::count();
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(horizon * norm.dim);
        sizes
    }

    pub fn new(norm: ObsNormalizer, config: &DynamicsConfig, horizon: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        norm.validate()?;
        let net = Approximator::init(&Self::layer_sizes(&norm, config.n_hist, horizon, &config.hidden), seed)?;
        Ok(DynamicsModel {
            net,
            n_hist: config.n_hist,
            sigma_ctx: config.sigma_ctx,
            horizon,
            norm,
        })
    }

    pub fn zeros(norm: ObsNormalizer, config: &DynamicsConfig, horizon: usize) -> Result<Self> {
        let mut m = Self::new(norm, config, horizon, 0)?;
        m.net.params_mut().fill(0.0);
        Ok(m)
    }

    /// Rebuilds a model around a network, checking that the widths agree.
    pub fn from_parts(net: Approximator, n_hist: usize, sigma_ctx: f64, horizon: usize, norm: ObsNormalizer) -> Result<Self> {
        norm.validate()?;
        let sizes = Self::layer_sizes(&norm, n_hist, horizon, &[]);
        if net.input_dim() != sizes[0] || net.output_dim() != sizes[1] {
            return Err(Error::shape("dynamics network", sizes[0], net.input_dim()));
        }
        Ok(DynamicsModel { net, n_hist, sigma_ctx, horizon, norm })
    }

    fn context_dim(&self) -> usize {
        self.n_hist * self.norm.dim
    }

    fn chunk_dim(&self) -> usize {
        self.horizon * action_width()
    }

    /// Encodes a history and chunk into model space.
    pub fn encode(&self, history: &ObservationHistory, chunk: &ActionChunk, task: TaskId) -> Result<(Vec<f64>, Vec<f64>)> {
        if history.len() != self.n_hist {
            return Err(Error::shape("history length", self.n_hist, history.len()));
        }
        if chunk.horizon() != self.horizon {
            return Err(Error::shape("chunk horizon", self.horizon, chunk.horizon()));
        }
        let mut ctx = Vec::with_capacity(self.context_dim());
        for f in history.frames() {
            self.norm.normalize_into(f, task, &mut ctx)?;
        }
        Ok((ctx, chunk_to_unit(chunk, task)?))
    }

    fn input_row(&self, context: &[f64], chunk: &[f64], task: TaskId) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(context);
        x.extend_from_slice(chunk);
        x.extend(task.one_hot());
        x
    }

    /// Normalized prediction for already-encoded inputs.
    pub fn predict_encoded(&self, context: &[f64], chunk: &[f64], task: TaskId) -> Result<Vec<f64>> {
        if context.len() != self.context_dim() || chunk.len() != self.chunk_dim() {
            return Err(Error::shape("encoded dynamics input", self.context_dim() + self.chunk_dim(), context.len() + chunk.len()));
        }
        self.net.forward(&self.input_row(context, chunk, task))
    }

    /// Batched normalized predictions; one row per `(context, chunk, task)`.
    pub fn predict_encoded_batch(&self, rows: &[(&[f64], &[f64], TaskId)]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((rows.len(), self.net.input_dim()));
        for (i, (c, a, t)) in rows.iter().enumerate() {
            if c.len() != self.context_dim() || a.len() != self.chunk_dim() {
                return Err(Error::shape("encoded dynamics input", self.context_dim() + self.chunk_dim(), c.len() + a.len()));
            }
            x.row_mut(i).assign(&ArrayView1::from(&self.input_row(c, a, *t)[..]));
        }
        self.net.forward_batch(x.view())
    }

    pub fn decode_frames(&self, z: &[f64], task: TaskId) -> Result<Vec<Observation>> {
        z.chunks(self.norm.dim).map(|f| self.norm.denormalize(f, task)).collect()
    }

    /// Predicts the next `H` observations.
    pub fn predict(&self, history: &ObservationHistory, chunk: &ActionChunk, task: TaskId) -> Result<Vec<Observation>> {
        let (ctx, a) = self.encode(history, chunk, task)?;
        let z = self.predict_encoded(&ctx, &a, task)?;
        self.decode_frames(&z, task)
    }

    /// Builds the network input and target matrices for a batch; seeded context
    /// noise is added to the normalized context frames only.
    pub fn prepare_batch(&self, batch: &[&Transition], rng: &mut impl Rng) -> Result<(Array2<f64>, Array2<f64>)> {
        if batch.is_empty() {
            return Err(Error::RejectedInput("empty dynamics batch".into()));
        }
        let out_dim = self.net.output_dim();
        let mut x = Array2::zeros((batch.len(), self.net.input_dim()));
        let mut y = Array2::zeros((batch.len(), out_dim));
        for (i, tr) in batch.iter().enumerate() {
            if tr.target.len() != out_dim {
                return Err(Error::shape("dynamics target", out_dim, tr.target.len()));
            }
            let mut ctx = tr.context.clone();
            if self.sigma_ctx > 0.0 {
                for v in &mut ctx {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += self.sigma_ctx * n;
                }
            }
            let row = self.input_row(&ctx, &tr.chunk, tr.task);
            if row.len() != x.ncols() {
                return Err(Error::shape("dynamics input", x.ncols(), row.len()));
            }
            x.row_mut(i).assign(&Array1::from(row));
            y.row_mut(i).assign(&ArrayView1::from(&tr.target[..]));
        }
        Ok((x, y))
    }

    fn mask(&self, task: TaskId) -> Vec<bool> {
        let d = TaskSpec::get(task).d_o;
        (0..self.horizon * self.norm.dim).map(|j| j % self.norm.dim < d).collect()
    }

    /// Mean squared error over the task's real dimensions and all `H` frames.
    pub fn loss_and_grad(&self, x: &Array2<f64>, y: &Array2<f64>, tasks: &[TaskId]) -> Result<(f64, Vec<f64>)> {
        let masks: Vec<Vec<bool>> = TaskId::ALL.iter().map(|&t| self.mask(t)).collect();
        gradient(&self.net, x.view(), |i, out| {
            let m = &masks[tasks[i].index()];
            let n = m.iter().filter(|&&b| b).count() as f64;
            let mut g = Array1::zeros(out.len());
            let mut l = 0.0;
            for j in 0..out.len() {
                if m[j] {
                    let r = out[j] - y[[i, j]];
                    l += r * r;
                    g[j] = 2.0 * r / n;
                }
            }
            (l / n, g)
        })
    }

    /// One optimizer step; returns the pre-step loss.
    pub fn train_step(&mut self, opt: &mut Adam, batch: &[&Transition], rng: &mut impl Rng) -> Result<f64> {
        let (x, y) = self.prepare_batch(batch, rng)?;
        let tasks: Vec<TaskId> = batch.iter().map(|t| t.task).collect();
        let (loss, grad) = self.loss_and_grad(&x, &y, &tasks)?;
        opt.step(self.net.params_mut(), &grad)?;
        Ok(loss)
    }

    /// Mean squared error of the first predicted frame in normalized space over
    /// each sample's real dimensions.
    pub fn one_step_mse(&self, set: &[Transition]) -> Result<f64> {
        self.first_frame_mse(set, false)
    }

    /// Same metric for the constant prediction of the training mean (zero in
    /// normalized space).
    pub fn baseline_one_step_mse(&self, set: &[Transition]) -> Result<f64> {
        self.first_frame_mse(set, true)
    }

    fn first_frame_mse(&self, set: &[Transition], baseline: bool) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::RejectedInput("empty evaluation set".into()));
        }
        let preds = if baseline {
            None
        } else {
            let rows: Vec<_> = set.iter().map(|t| (&t.context[..], &t.chunk[..], t.task)).collect();
            Some(self.predict_encoded_batch(&rows)?)
        };
        let mut total = 0.0;
        for (i, tr) in set.iter().enumerate() {
            let d = TaskSpec::get(tr.task).d_o;
            let mut l = 0.0;
            for j in 0..d {
                let p = preds.as_ref().map_or(0.0, |p| p[[i, j]]);
                l += (p - tr.target[j]).powi(2);
            }
            total += l / d as f64;
        }
        Ok(total / set.len() as f64)
    }
}

/// Model-space transitions for every step of every episode. Targets past the
/// end of an episode repeat the terminal frame.
pub fn build_transitions(model: &DynamicsModel, episodes: &[Episode]) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for e in episodes {
        let big_t = e.horizon();
        for t in 0..big_t {
            let hist = window_history(e, t, model.n_hist)?;
            let (context, chunk) = model.encode(&hist, &e.steps[t].chunk, e.task)?;
            let mut target = Vec::with_capacity(model.horizon * model.norm.dim);
            for k in 1..=model.horizon {
                model.norm.normalize_into(e.frame((t + k).min(big_t)), e.task, &mut target)?;
            }
            out.push(Transition { task: e.task, context, chunk, target });
        }
    }
    Ok(out)
}

/// Mean L2 distance (observation space) between the trajectories predicted
/// for two chunks from the same history.
pub fn controllability_gap(
    model: &DynamicsModel,
    history: &ObservationHistory,
    chunk_a: &ActionChunk,
    chunk_b: &ActionChunk,
    task: TaskId,
) -> Result<f64> {
    let pa = model.predict(history, chunk_a, task)?;
    let pb = model.predict(history, chunk_b, task)?;
    Ok(trajectory_distance(&pa, &pb))
}

pub fn trajectory_distance(a: &[Observation], b: &[Observation]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.values()
                .iter()
                .zip(y.values())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// One batch of a schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tasks: Vec<TaskId>,
    pub indices: Vec<usize>,
    /// Fewer than `batch_size` samples remained for the chosen tasks.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub batch_size: usize,
    pub batches: Vec<Batch>,
}

/// One epoch of batches, each drawn from at most `k_tasks` tasks chosen
/// uniformly among those with samples left. Within a batch, samples are drawn
/// in proportion to what each chosen task has left, so `k_tasks` equal to the
/// task count is an ordinary shuffle.
pub fn make_task_centric_batches(tasks: &[TaskId], batch_size: usize, k_tasks: usize, seed: u64) -> Result<BatchSchedule> {
    if tasks.is_empty() {
        return Err(Error::RejectedInput("dataset has no transitions".into()));
    }
    if batch_size == 0 || k_tasks == 0 {
        return Err(Error::Config("batch_size and k_tasks must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); TaskId::count()];
    for (i, t) in tasks.iter().enumerate() {
        pools[t.index()].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let mut batches = Vec::new();
    loop {
        let mut live: Vec<usize> = (0..pools.len()).filter(|&k| !pools[k].is_empty()).collect();
        if live.is_empty() {
            break;
        }
        live.shuffle(&mut rng);
        live.truncate(k_tasks);
        live.sort_unstable();
        let mut indices = Vec::with_capacity(batch_size);
        while indices.len() < batch_size {
            let left: usize = live.iter().map(|&k| pools[k].len()).sum();
            if left == 0 {
                break;
            }
            let mut r = rng.gen_range(0..left);
            let k = *live
                .iter()
                .find(|&&k| {
                    if r < pools[k].len() {
                        true
                    } else {
                        r -= pools[k].len();
                        false
                    }
                })
                .expect("draw falls inside a pool");
            indices.push(pools[k].pop().expect("pool is nonempty"));
        }
        let short = indices.len() < batch_size;
        batches.push(Batch {
            tasks: live.iter().map(|&k| TaskId::from_index(k).expect("registered task")).collect(),
            indices,
            short,
        });
    }
    Ok(BatchSchedule { batch_size, batches })
}

/// Metric row emitted during training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsMetrics {
    pub step: usize,
    pub loss: f64,
    pub heldout_mse: f64,
    pub ctrl_gap: f64,
}

/// Probe used for the controllability metric during training.
pub struct GapProbe {
    pub history: ObservationHistory,
    pub chunk_a: ActionChunk,
    pub chunk_b: ActionChunk,
    pub task: TaskId,
    /// The same distance measured in the simulator.
    pub sim_gap: f64,
}

/// Constant chunks driving the first action dimension to its two bounds, the
/// other dimensions held at idle.
pub fn opposite_chunks(task: TaskId) -> (ActionChunk, ActionChunk) {
    let spec = TaskSpec::get(task);
    let make = |v: f64| {
        let mut row = spec.idle_action.clone();
        row[0] = v;
        ActionChunk::from_rows(&vec![row; spec.horizon]).expect("constant chunk is well formed")
    };
    (make(spec.bounds.hi[0]), make(spec.bounds.lo[0]))
}

/// Opposite-action probes at every `stride`-th step of each episode.
pub fn gap_probes(episodes: &[Episode], n_hist: usize, stride: usize) -> Result<Vec<GapProbe>> {
    if stride == 0 {
        return Err(Error::Config("probe stride must be positive".into()));
    }
    let mut out = Vec::new();
    for e in episodes {
        let (chunk_a, chunk_b) = opposite_chunks(e.task);
        for t in (0..e.horizon()).step_by(stride) {
            let state = state_at(e, t)?;
            let sim_gap = trajectory_distance(&simulate_chunk(&state, &chunk_a), &simulate_chunk(&state, &chunk_b));
            out.push(GapProbe {
                history: window_history(e, t, n_hist)?,
                chunk_a: chunk_a.clone(),
                chunk_b: chunk_b.clone(),
                task: e.task,
                sim_gap,
            });
        }
    }
    Ok(out)
}

pub fn mean_sim_gap(probes: &[GapProbe]) -> f64 {
    if probes.is_empty() {
        return 0.0;
    }
    probes.iter().map(|p| p.sim_gap).sum::<f64>() / probes.len() as f64
}

/// Trains for `config.steps` optimizer steps over repeated task-centric epochs.
/// Short batches are skipped so every step sees exactly `batch_size` samples.
pub fn train_dynamics(
    model: &mut DynamicsModel,
    train: &[Transition],
    heldout: &[Transition],
    probes: &[GapProbe],
    config: &DynamicsConfig,
    seed: u64,
) -> Result<Vec<DynamicsMetrics>> {
    config.validate()?;
    let tasks: Vec<TaskId> = train.iter().map(|t| t.task).collect();
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, model.net.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeding::derive(seed, &[crate::seeding::tag("dynamics-noise")]));
    let mut metrics = Vec::new();
    let mut step = 0;
    let mut epoch = 0u64;
    let mut recent = Vec::new();
    while step < config.steps {
        let schedule = make_task_centric_batches(&tasks, config.batch_size, config.k_tasks, crate::seeding::derive(seed, &[epoch]))?;
        epoch += 1;
        let full: Vec<&Batch> = schedule.batches.iter().filter(|b| !b.short).collect();
        if full.is_empty() {
            return Err(Error::Config("batch_size exceeds the per-task transition count".into()));
        }
        for b in full {
            if step >= config.steps {
                break;
            }
            opt.config.lr = cosine_lr(config.lr, config.min_lr_ratio, step, config.steps);
            let batch: Vec<&Transition> = b.indices.iter().map(|&i| &train[i]).collect();
            recent.push(model.train_step(&mut opt, &batch, &mut rng)?);
            step += 1;
            if config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps) {
                let loss = recent.iter().sum::<f64>() / recent.len() as f64;
                recent.clear();
                let heldout_mse = if heldout.is_empty() { f64::NAN } else { model.one_step_mse(heldout)? };
                let ctrl_gap = mean_gap(model, probes)?;
                metrics.push(DynamicsMetrics { step, loss, heldout_mse, ctrl_gap });
            }
        }
    }
    Ok(metrics)
}

pub fn mean_gap(model: &DynamicsModel, probes: &[GapProbe]) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in probes {
        total += controllability_gap(model, &p.history, &p.chunk_a, &p.chunk_b, p.task)?;
    }
    Ok(total / probes.len() as f64)
}
