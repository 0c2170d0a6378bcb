//! Advantage-conditioned flow-matching chunk policy and its offline warm-up.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::{Adam, AdamConfig, FlowBatch, FlowHead};
use crate::domain::{ActionChunk, AdvantageBinning, Episode, Observation, Source, TaskId};
use crate::dynamics::cosine_lr;
use crate::error::{Error, Result};
use crate::norm::{action_width, chunk_to_unit, unit_to_chunk, ObsNormalizer};
use crate::value::OfflineLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub n_integration_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub eval_every: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: vec![256, 256],
            n_integration_steps: 10,
            batch_size: 64,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            weight_decay: 0.0,
            warmup_steps: 40000,
            eval_every: 500,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_integration_steps == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("policy batch_size, n_integration_steps and lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) || self.weight_decay < 0.0 {
            return Err(Error::Config("policy min_lr_ratio or weight_decay out of range".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub head: FlowHead,
    pub binning: AdvantageBinning,
    pub norm: ObsNormalizer,
}

impl Policy {
    pub fn cond_dim(norm: &ObsNormalizer, binning: &AdvantageBinning) -> usize {
        norm.dim + TaskId::count() + binning.n_bins()
    }

    pub fn new(norm: ObsNormalizer, binning: AdvantageBinning, horizon: usize, config: &PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        norm.validate()?;
        let head = FlowHead::new(
            Self::cond_dim(&norm, &binning),
            horizon,
            action_width(),
            &config.hidden,
            config.n_integration_steps,
            seed,
        )?;
        Ok(Policy { head, binning, norm })
    }

    pub fn from_parts(head: FlowHead, binning: AdvantageBinning, norm: ObsNormalizer) -> Result<Self> {
        norm.validate()?;
        let want = Self::cond_dim(&norm, &binning);
        if head.cond_dim != want || head.action_dim != action_width() {
            return Err(Error::shape("policy condition", want, head.cond_dim));
        }
        Ok(Policy { head, binning, norm })
    }

    pub fn horizon(&self) -> usize {
        self.head.horizon
    }

    pub fn params(&self) -> &[f64] {
        self.head.net.params()
    }

    /// Normalized observation, then task one-hot, then bin one-hot.
    pub fn condition_vector(&self, bin: usize, obs: &Observation, task: TaskId) -> Result<Vec<f64>> {
        self.binning.check_bin(bin)?;
        let mut c = self.norm.normalize(obs, task)?;
        c.extend(task.one_hot());
        c.extend(self.binning.one_hot(bin)?);
        Ok(c)
    }

    fn unit_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0; action_width()], vec![1.0; action_width()])
    }

    /// Samples a chunk by integrating the flow from seeded noise; clamped to the task bounds.
    pub fn sample(&self, bin: usize, obs: &Observation, task: TaskId, seed: u64) -> Result<ActionChunk> {
        let cond = self.condition_vector(bin, obs, task)?;
        let (lo, hi) = self.unit_bounds();
        let u = self.head.sample(&cond, seed, &lo, &hi)?;
        unit_to_chunk(&u, self.horizon(), task)
    }

    /// Batched sampling in unit space from prepared conditions; one seed per row.
    pub fn sample_unit_batch(&self, conds: &[Vec<f64>], seeds: &[u64]) -> Result<Array2<f64>> {
        let d = self.head.chunk_dim();
        let mut c = Array2::zeros((conds.len(), self.head.cond_dim));
        let mut noise = Array2::zeros((conds.len(), d));
        for (i, (row, &s)) in conds.iter().zip(seeds).enumerate() {
            if row.len() != self.head.cond_dim {
                return Err(Error::shape("policy condition", self.head.cond_dim, row.len()));
            }
            c.row_mut(i).assign(&ArrayView1::from(&row[..]));
            noise.row_mut(i).assign(&Array1::from(FlowHead::noise(d, s)));
        }
        let (lo, hi) = self.unit_bounds();
        self.head.sample_batch(c.view(), noise, &lo, &hi)
    }
}

/// Seeded chunk from the policy prompted with `bin`.
pub fn policy_sample(policy: &Policy, bin: usize, obs: &Observation, task: TaskId, seed: u64) -> Result<ActionChunk> {
    policy.sample(bin, obs, task, seed)
}

/// An offline training record.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupRecord {
    pub obs: Observation,
    pub task: TaskId,
    pub chunk: ActionChunk,
    pub bin: usize,
    pub source: Source,
    /// Set for rollout sources; the bin must be its discretization.
    pub advantage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarmupDataset {
    pub records: Vec<WarmupRecord>,
}

impl WarmupDataset {
    /// Demonstrations get the optimal token; rollout steps get the bin of their label.
    pub fn build(episodes: &[Episode], labels: &[OfflineLabel], binning: &AdvantageBinning) -> Result<Self> {
        let mut records = Vec::new();
        for e in episodes.iter().filter(|e| e.source.is_demonstration()) {
            for s in &e.steps {
                records.push(WarmupRecord {
                    obs: s.obs.clone(),
                    task: e.task,
                    chunk: s.chunk.clone(),
                    bin: binning.n_bins(),
                    source: e.source,
                    advantage: None,
                });
            }
        }
        for l in labels {
            let e = episodes.get(l.episode).ok_or(Error::Index { index: l.episode, len: episodes.len() })?;
            let s = e.steps.get(l.t).ok_or(Error::Index { index: l.t, len: e.steps.len() })?;
            records.push(WarmupRecord {
                obs: s.obs.clone(),
                task: e.task,
                chunk: s.chunk.clone(),
                bin: binning.discretize(l.advantage)?,
                source: e.source,
                advantage: Some(l.advantage),
            });
        }
        let ds = WarmupDataset { records };
        ds.validate(binning)?;
        Ok(ds)
    }

    pub fn validate(&self, binning: &AdvantageBinning) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let ok = if r.source.is_demonstration() {
                r.bin == binning.n_bins()
            } else {
                match r.advantage {
                    Some(a) => binning.discretize(a)? == r.bin,
                    None => false,
                }
            };
            if !ok {
                return Err(Error::Config(format!(
                    "warm-up record {i} ({:?}) has bin {} inconsistent with its source",
                    r.source, r.bin
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Condition and unit-space target for flow training.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn flow_record(policy: &Policy, bin: usize, obs: &Observation, task: TaskId, chunk: &ActionChunk) -> Result<FlowRecord> {
    Ok(FlowRecord {
        cond: policy.condition_vector(bin, obs, task)?,
        target: chunk_to_unit(chunk, task)?,
    })
}

pub fn encode_warmup(policy: &Policy, ds: &WarmupDataset) -> Result<Vec<FlowRecord>> {
    ds.records
        .iter()
        .map(|r| flow_record(policy, r.bin, &r.obs, r.task, &r.chunk))
        .collect()
}

/// One flow-matching step on the given records; noise and flow time are drawn
/// from `rng`. Returns the pre-step loss.
pub fn flow_step(policy: &mut Policy, opt: &mut Adam, batch: &[&FlowRecord], rng: &mut impl Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::RejectedInput("empty policy batch".into()));
    }
    let (cd, d) = (policy.head.cond_dim, policy.head.chunk_dim());
    let n = batch.len();
    let mut fb = FlowBatch {
        cond: Array2::zeros((n, cd)),
        target: Array2::zeros((n, d)),
        noise: Array2::zeros((n, d)),
        tau: Array1::zeros(n),
    };
    for (i, r) in batch.iter().enumerate() {
        fb.cond.row_mut(i).assign(&ArrayView1::from(&r.cond[..]));
        fb.target.row_mut(i).assign(&ArrayView1::from(&r.target[..]));
        for j in 0..d {
            fb.noise[[i, j]] = StandardNormal.sample(rng);
        }
        fb.tau[i] = rng.gen_range(0.0..=1.0);
    }
    let (loss, grad) = policy.head.loss_and_grad(&fb)?;
    opt.step(policy.head.net.params_mut(), &grad)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarmupMetrics {
    pub step: usize,
    pub loss: f64,
}

/// Offline warm-up: flow matching on (condition, chunk) pairs from the static dataset.
pub fn warmup_train(
    policy: &mut Policy,
    ds: &WarmupDataset,
    config: &PolicyConfig,
    steps: usize,
    seed: u64,
) -> Result<Vec<WarmupMetrics>> {
    config.validate()?;
    if steps == 0 {
        return Ok(Vec::new());
    }
    if ds.is_empty() {
        return Err(Error::Config("warm-up dataset is empty".into()));
    }
    ds.validate(&policy.binning)?;
    let recs = encode_warmup(policy, ds)?;
    let mut opt = Adam::new(config.adam(), policy.head.net.n_params());
    let mut rng = crate::selfimprove::training_rng(seed);
    let mut metrics = Vec::new();
    let mut acc = (0.0, 0usize);
    for step in 0..steps {
        opt.config.lr = cosine_lr(config.lr, config.min_lr_ratio, step, steps);
        let (idx, _) = crate::selfimprove::draw_mixed(&mut rng, recs.len(), 0, 1.0, config.batch_size);
        let batch: Vec<&FlowRecord> = idx.iter().map(|&i| &recs[i]).collect();
        let l = flow_step(policy, &mut opt, &batch, &mut rng)?;
        acc.0 += l;
        acc.1 += 1;
        let done = step + 1;
        if config.eval_every > 0 && (done % config.eval_every == 0 || done == steps) {
            metrics.push(WarmupMetrics { step: done, loss: acc.0 / acc.1 as f64 });
            acc = (0.0, 0);
        }
    }
    Ok(metrics)
}

/// Advantage range spanning the `q`..`1-q` quantiles of the offline labels.
/// Uniform bins over the `[q, 1-q]` quantile range of the offline labels. With
/// `reserve_top` the range is stretched by one bin so every label lands at most
/// in bin `n_bins - 1`, leaving the top bin to demonstrations.
pub fn calibrated_binning(labels: &[OfflineLabel], n_bins: usize, q: f64, reserve_top: bool) -> Result<AdvantageBinning> {
    if labels.is_empty() {
        return Err(Error::Config("advantage calibration needs rollout labels".into()));
    }
    if !(0.0..0.5).contains(&q) {
        return Err(Error::Config(format!("calibration quantile {q} outside [0, 0.5)")));
    }
    let mut a: Vec<f64> = labels.iter().map(|l| l.advantage).collect();
    a.sort_by(f64::total_cmp);
    let at = |p: f64| a[((a.len() - 1) as f64 * p).round() as usize];
    let (lo, hi) = (at(q), at(1.0 - q));
    if hi - lo < 1e-9 {
        return Err(Error::Config("offline advantages are degenerate; cannot calibrate bins".into()));
    }
    if reserve_top && n_bins > 1 {
        let width = (hi - lo) / (n_bins - 1) as f64 * (1.0 + 1e-9);
        return AdvantageBinning::new(n_bins, lo, lo + width * n_bins as f64);
    }
    AdvantageBinning::new(n_bins, lo, hi)
}
