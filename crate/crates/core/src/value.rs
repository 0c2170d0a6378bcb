//! Progress/TD value model and the chunk advantage operator.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{gradient, Adam, AdamConfig, Approximator};
use crate::domain::{Episode, Observation, Source, TaskId};
use crate::dynamics::cosine_lr;
use crate::error::{Error, Result};
use crate::norm::ObsNormalizer;
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueConfig {
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    /// Progress-only steps.
    pub phase1_steps: usize,
    /// Progress + TD steps.
    pub phase2_steps: usize,
    /// Steps between target-network refreshes; 0 bootstraps from the live network.
    pub target_refresh: usize,
    pub eval_every: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig {
            gamma: 0.995,
            hidden: vec![128, 128],
            batch_size: 64,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            phase1_steps: 2000,
            phase2_steps: 8000,
            target_refresh: 200,
            eval_every: 500,
        }
    }
}

impl ValueConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("value batch_size, lr or min_lr_ratio out of range".into()));
        }
        Ok(())
    }

    /// Splits a total step budget 1:4 between the two phases.
    pub fn with_budget(mut self, total: usize) -> Self {
        self.phase1_steps = total / 5;
        self.phase2_steps = total - self.phase1_steps;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub net: Approximator,
    pub gamma: f64,
    pub norm: ObsNormalizer,
}

impl ValueModel {
    fn layer_sizes(norm: &ObsNormalizer, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![norm.dim + TaskId::count()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        sizes
    }

    pub fn new(norm: ObsNormalizer, config: &ValueConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        norm.validate()?;
        let net = Approximator::init(&Self::layer_sizes(&norm, &config.hidden), seed)?;
        Ok(ValueModel { net, gamma: config.gamma, norm })
    }

    pub fn zeros(norm: ObsNormalizer, config: &ValueConfig) -> Result<Self> {
        let mut m = Self::new(norm, config, 0)?;
        m.net.params_mut().fill(0.0);
        Ok(m)
    }

    pub fn from_parts(net: Approximator, gamma: f64, norm: ObsNormalizer) -> Result<Self> {
        norm.validate()?;
        if net.input_dim() != norm.dim + TaskId::count() || net.output_dim() != 1 {
            return Err(Error::shape("value network input", norm.dim + TaskId::count(), net.input_dim()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {gamma} outside (0, 1]")));
        }
        Ok(ValueModel { net, gamma, norm })
    }

    /// Network input for one observation.
    pub fn encode(&self, obs: &Observation, task: TaskId) -> Result<Vec<f64>> {
        let mut x = self.norm.normalize(obs, task)?;
        x.extend(task.one_hot());
        Ok(x)
    }

    pub fn value(&self, obs: &Observation, task: TaskId) -> Result<f64> {
        Ok(self.net.forward(&self.encode(obs, task)?)?[0])
    }

    pub fn value_encoded(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.forward(x)?[0])
    }

    /// Values for a batch of encoded inputs.
    pub fn value_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let m = stack(xs, self.net.input_dim())?;
        Ok(self.net.forward_batch(m.view())?.column(0).to_vec())
    }

    pub fn values(&self, frames: &[Observation], task: TaskId) -> Result<Vec<f64>> {
        let xs = frames.iter().map(|f| self.encode(f, task)).collect::<Result<Vec<_>>>()?;
        self.value_batch(&xs)
    }
}

fn stack(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::shape("value input", width, r.len()));
        }
        m.row_mut(i).assign(&ArrayView1::from(&r[..]));
    }
    Ok(m)
}

/// Chunk advantage: the mean value over the `H` future frames minus the
/// current value.
pub fn advantage(model: &ValueModel, obs: &Observation, future: &[Observation], task: TaskId) -> Result<f64> {
    if future.is_empty() {
        return Err(Error::RejectedInput("advantage needs at least one future frame".into()));
    }
    let v0 = model.value(obs, task)?;
    let vs = model.values(future, task)?;
    Ok(advantage_from_values(v0, &vs))
}

pub fn advantage_from_values(v0: f64, future: &[f64]) -> f64 {
    future.iter().sum::<f64>() / future.len() as f64 - v0
}

/// Progress regression sample: target `t / T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressSample {
    pub obs: Observation,
    pub task: TaskId,
    pub t: usize,
    pub horizon: usize,
}

/// One-step TD sample; `next_obs = None` marks a terminal transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSample {
    pub obs: Observation,
    pub task: TaskId,
    pub next_obs: Option<Observation>,
    pub reward: f64,
}

/// Encoded progress record.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgRec {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdRec {
    pub x: Vec<f64>,
    pub x_next: Option<Vec<f64>>,
    pub reward: f64,
}

pub fn encode_progress(model: &ValueModel, batch: &[ProgressSample]) -> Result<Vec<ProgRec>> {
    batch
        .iter()
        .map(|s| {
            if s.horizon == 0 {
                return Err(Error::RejectedInput("progress horizon T must be at least 1".into()));
            }
            if s.t > s.horizon {
                return Err(Error::RejectedInput(format!("progress step {} beyond T = {}", s.t, s.horizon)));
            }
            Ok(ProgRec {
                x: model.encode(&s.obs, s.task)?,
                y: s.t as f64 / s.horizon as f64,
            })
        })
        .collect()
}

pub fn encode_td(model: &ValueModel, batch: &[TdSample]) -> Result<Vec<TdRec>> {
    batch
        .iter()
        .map(|s| {
            if ![0.0, 1.0, -1.0].contains(&s.reward) {
                return Err(Error::RejectedInput(format!("TD reward {} not in {{0, +1, -1}}", s.reward)));
            }
            Ok(TdRec {
                x: model.encode(&s.obs, s.task)?,
                x_next: s.next_obs.as_ref().map(|o| model.encode(o, s.task)).transpose()?,
                reward: s.reward,
            })
        })
        .collect()
}

fn progress_grad(model: &ValueModel, recs: &[&ProgRec]) -> Result<(f64, Vec<f64>)> {
    let x = stack(&recs.iter().map(|r| r.x.clone()).collect::<Vec<_>>(), model.net.input_dim())?;
    gradient(&model.net, x.view(), |i, out| {
        let r = out[0] - recs[i].y;
        (r * r, Array1::from(vec![2.0 * r]))
    })
}

/// Bootstrapped targets `r + γ·V_target(o')`, with zero bootstrap at terminals.
pub fn td_targets(target: &ValueModel, gamma: f64, recs: &[&TdRec]) -> Result<Vec<f64>> {
    let next: Vec<Vec<f64>> = recs.iter().filter_map(|r| r.x_next.clone()).collect();
    let vn = target.value_batch(&next)?;
    let mut it = vn.into_iter();
    Ok(recs
        .iter()
        .map(|r| r.reward + if r.x_next.is_some() { gamma * it.next().expect("one value per next frame") } else { 0.0 })
        .collect())
}

fn td_grad(model: &ValueModel, target: &ValueModel, recs: &[&TdRec]) -> Result<(f64, Vec<f64>)> {
    let y = td_targets(target, model.gamma, recs)?;
    let x = stack(&recs.iter().map(|r| r.x.clone()).collect::<Vec<_>>(), model.net.input_dim())?;
    gradient(&model.net, x.view(), |i, out| {
        let r = out[0] - y[i];
        (r * r, Array1::from(vec![2.0 * r]))
    })
}

pub fn progress_loss(model: &ValueModel, batch: &[ProgressSample]) -> Result<f64> {
    let recs = encode_progress(model, batch)?;
    Ok(progress_grad(model, &recs.iter().collect::<Vec<_>>())?.0)
}

/// TD loss against `target` (pass the model itself to bootstrap from the live network).
pub fn td_loss(model: &ValueModel, target: &ValueModel, batch: &[TdSample]) -> Result<f64> {
    let recs = encode_td(model, batch)?;
    Ok(td_grad(model, target, &recs.iter().collect::<Vec<_>>())?.0)
}

/// Loss and gradient of one combined step. In phase 1 the TD batch is ignored
/// entirely; in phase 2 the two mean losses are simply added.
pub fn combined_loss_and_grad(
    model: &ValueModel,
    target: &ValueModel,
    prog: &[&ProgRec],
    td: &[&TdRec],
    phase2: bool,
) -> Result<(f64, f64, Vec<f64>)> {
    let (lp, mut g) = if prog.is_empty() {
        (0.0, vec![0.0; model.net.n_params()])
    } else {
        progress_grad(model, prog)?
    };
    let mut lt = 0.0;
    if phase2 && !td.is_empty() {
        let (l, gt) = td_grad(model, target, td)?;
        lt = l;
        for (a, b) in g.iter_mut().zip(gt) {
            *a += b;
        }
    }
    Ok((lp, lt, g))
}

/// Progress records from success-labelled episodes (every frame, terminal included).
pub fn progress_records(model: &ValueModel, episodes: &[Episode]) -> Result<Vec<ProgRec>> {
    let mut samples = Vec::new();
    for e in episodes.iter().filter(|e| e.is_success()) {
        let big_t = e.horizon();
        for (t, f) in e.frames().enumerate() {
            samples.push(ProgressSample { obs: f.clone(), task: e.task, t, horizon: big_t });
        }
    }
    encode_progress(model, &samples)
}

/// TD transitions with a `±1` reward on the final step of each episode.
pub fn td_records(model: &ValueModel, episodes: &[Episode]) -> Result<Vec<TdRec>> {
    let mut samples = Vec::new();
    for e in episodes {
        let big_t = e.horizon();
        let terminal_reward = if e.is_success() { 1.0 } else { -1.0 };
        for t in 0..big_t {
            let last = t + 1 == big_t;
            samples.push(TdSample {
                obs: e.frame(t).clone(),
                task: e.task,
                next_obs: if last { None } else { Some(e.frame(t + 1).clone()) },
                reward: if last { terminal_reward } else { 0.0 },
            });
        }
    }
    encode_td(model, &samples)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueMetrics {
    pub step: usize,
    #[serde(rename = "L_prog")]
    pub l_prog: f64,
    #[serde(rename = "L_TD")]
    pub l_td: f64,
    pub heldout_spearman: f64,
    pub success_failure_margin: f64,
}

/// Trains on encoded records. Each step draws a progress batch and, in phase 2,
/// a TD batch of the same size. `eval` is called every `eval_every` steps and at the end.
pub fn fit_records<E>(
    model: &mut ValueModel,
    prog: &[ProgRec],
    td: &[TdRec],
    config: &ValueConfig,
    seed: u64,
    mut eval: E,
) -> Result<Vec<ValueMetrics>>
where
    E: FnMut(&ValueModel) -> Result<(f64, f64)>,
{
    config.validate()?;
    let total = config.phase1_steps + config.phase2_steps;
    if config.phase1_steps > 0 && prog.is_empty() {
        return Err(Error::Config("progress phase needs success episodes".into()));
    }
    if config.phase2_steps > 0 && td.is_empty() {
        return Err(Error::Config("TD phase needs transitions".into()));
    }
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, model.net.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[seeding::tag("value-batches")]));
    let mut target = model.clone();
    let mut metrics = Vec::new();
    let (mut acc_p, mut acc_t, mut acc_n) = (0.0, 0.0, 0usize);
    for step in 0..total {
        let phase2 = step >= config.phase1_steps;
        if phase2 && config.target_refresh > 0 && (step - config.phase1_steps) % config.target_refresh == 0 {
            target = model.clone();
        }
        let pb: Vec<&ProgRec> = if prog.is_empty() {
            Vec::new()
        } else {
            (0..config.batch_size).map(|_| &prog[rng.gen_range(0..prog.len())]).collect()
        };
        let tb: Vec<&TdRec> = if phase2 {
            (0..config.batch_size).map(|_| &td[rng.gen_range(0..td.len())]).collect()
        } else {
            Vec::new()
        };
        let (lp, lt, g) = if config.target_refresh == 0 {
            combined_loss_and_grad(model, model, &pb, &tb, phase2)?
        } else {
            combined_loss_and_grad(model, &target, &pb, &tb, phase2)?
        };
        opt.config.lr = cosine_lr(config.lr, config.min_lr_ratio, step, total);
        opt.step(model.net.params_mut(), &g)?;
        acc_p += lp;
        acc_t += lt;
        acc_n += 1;
        let done = step + 1;
        if config.eval_every > 0 && (done % config.eval_every == 0 || done == total) {
            let (heldout_spearman, success_failure_margin) = eval(model)?;
            metrics.push(ValueMetrics {
                step: done,
                l_prog: acc_p / acc_n as f64,
                l_td: acc_t / acc_n as f64,
                heldout_spearman,
                success_failure_margin,
            });
            acc_p = 0.0;
            acc_t = 0.0;
            acc_n = 0;
        }
    }
    Ok(metrics)
}

/// Two-phase training on offline episodes. Phase 1 regresses progress on
/// success episodes; phase 2 adds TD over every episode.
pub fn train_value(
    model: &mut ValueModel,
    train: &[Episode],
    heldout: &[Episode],
    config: &ValueConfig,
    seed: u64,
) -> Result<Vec<ValueMetrics>> {
    if config.phase2_steps > 0 && !train.iter().any(|e| !e.is_success()) {
        return Err(Error::Config("TD phase needs failure episodes to learn failure sensitivity".into()));
    }
    let prog = progress_records(model, train)?;
    let td = td_records(model, train)?;
    fit_records(model, &prog, &td, config, seed, |m| {
        Ok((heldout_spearman(m, heldout)?, success_failure_margin(m, heldout)?))
    })
}

/// Mean Spearman correlation between value and time over held-out expert episodes.
pub fn heldout_spearman(model: &ValueModel, episodes: &[Episode]) -> Result<f64> {
    let mut rs = Vec::new();
    for e in episodes.iter().filter(|e| e.source == Source::Expert) {
        let frames: Vec<Observation> = e.frames().cloned().collect();
        let v = model.values(&frames, e.task)?;
        let t: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        rs.push(spearman(&v, &t));
    }
    Ok(if rs.is_empty() { f64::NAN } else { rs.iter().sum::<f64>() / rs.len() as f64 })
}

/// Mean value of the last pre-terminal frame of success episodes minus that of
/// failure episodes.
pub fn success_failure_margin(model: &ValueModel, episodes: &[Episode]) -> Result<f64> {
    let (mut s, mut f) = (Vec::new(), Vec::new());
    for e in episodes {
        let v = model.value(e.frame(e.horizon() - 1), e.task)?;
        if e.is_success() {
            s.push(v);
        } else {
            f.push(v);
        }
    }
    if s.is_empty() || f.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64 - f.iter().sum::<f64>() / f.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Advantage label for one step of a rollout-source episode.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineLabel {
    pub episode: usize,
    pub t: usize,
    pub advantage: f64,
    /// Fewer than `H` recorded frames followed this step.
    pub truncated: bool,
}

/// Labels rollout-source steps with the advantage computed from the recorded
/// later frames. Demonstration sources are skipped.
pub fn label_offline_rollouts(model: &ValueModel, episodes: &[Episode], horizon: usize) -> Result<Vec<OfflineLabel>> {
    if horizon == 0 {
        return Err(Error::RejectedInput("horizon must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        if !e.source.is_rollout() {
            continue;
        }
        let frames: Vec<Observation> = e.frames().cloned().collect();
        let v = model.values(&frames, e.task)?;
        let big_t = e.horizon();
        for t in 0..big_t {
            let end = (t + horizon).min(big_t);
            out.push(OfflineLabel {
                episode: i,
                t,
                advantage: advantage_from_values(v[t], &v[t + 1..=end]),
                truncated: t + horizon > big_t,
            });
        }
    }
    Ok(out)
}
