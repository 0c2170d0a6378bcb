use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mlp::Approximator;
use crate::error::{Error, Result};

/// Conditional flow-matching head over flattened `H × d_a` chunks.
///
/// The network input is `condition ⊕ x_τ ⊕ τ` and its output is a velocity of
/// dimension `H·d_a`. Training uses the linear path
/// `x_τ = (1 − τ)·noise + τ·target` with constant velocity `target − noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowHead {
    pub net: Approximator,
    pub cond_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub n_integration_steps: usize,
}

/// A training batch: one row per sample.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub cond: Array2<f64>,
    pub target: Array2<f64>,
    pub noise: Array2<f64>,
    pub tau: Array1<f64>,
}

/// Fixed-step explicit Euler integration of `dx/dτ = field(x, τ)` from τ = 0 to 1.
pub fn integrate_euler<F>(mut x: Vec<f64>, n_steps: usize, mut field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let dt = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let v = field(&x, k as f64 * dt)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("flow trajectory", Some(k)));
        }
    }
    Ok(x)
}

impl FlowHead {
    pub fn new(
        cond_dim: usize,
        horizon: usize,
        action_dim: usize,
        hidden: &[usize],
        n_integration_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let chunk_dim = horizon * action_dim;
        let mut sizes = vec![cond_dim + chunk_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(chunk_dim);
        Self::from_net(Approximator::init(&sizes, seed)?, cond_dim, horizon, action_dim, n_integration_steps)
    }

    pub fn from_net(
        net: Approximator,
        cond_dim: usize,
        horizon: usize,
        action_dim: usize,
        n_integration_steps: usize,
    ) -> Result<Self> {
        let chunk_dim = horizon * action_dim;
        if net.input_dim() != cond_dim + chunk_dim + 1 {
            return Err(Error::shape("flow head input", cond_dim + chunk_dim + 1, net.input_dim()));
        }
        if net.output_dim() != chunk_dim {
            return Err(Error::shape("flow head output", chunk_dim, net.output_dim()));
        }
        if n_integration_steps == 0 {
            return Err(Error::Config("flow head needs >= 1 integration step".into()));
        }
        Ok(FlowHead {
            net,
            cond_dim,
            horizon,
            action_dim,
            n_integration_steps,
        })
    }

    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    fn check_dims(&self, cond: &[f64], chunk: &[f64]) -> Result<()> {
        if cond.len() != self.cond_dim {
            return Err(Error::shape("flow condition", self.cond_dim, cond.len()));
        }
        if chunk.len() != self.chunk_dim() {
            return Err(Error::shape("flow chunk", self.chunk_dim(), chunk.len()));
        }
        Ok(())
    }

    pub fn velocity(&self, cond: &[f64], x: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.check_dims(cond, x)?;
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend_from_slice(cond);
        input.extend_from_slice(x);
        input.push(tau);
        self.net.forward(&input)
    }

    /// Squared error between the predicted velocity at `x_τ` and `target − noise`.
    pub fn flow_loss(&self, cond: &[f64], target: &[f64], noise: &[f64], tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::RejectedInput(format!("flow time {tau} outside [0, 1]")));
        }
        self.check_dims(cond, target)?;
        self.check_dims(cond, noise)?;
        let x_tau: Vec<f64> = noise
            .iter()
            .zip(target)
            .map(|(n, t)| (1.0 - tau) * n + tau * t)
            .collect();
        let v = self.velocity(cond, &x_tau, tau)?;
        Ok(v
            .iter()
            .zip(target.iter().zip(noise))
            .map(|(v, (t, n))| (v - (t - n)).powi(2))
            .sum())
    }

    /// Mean per-sample flow loss over a batch and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &FlowBatch) -> Result<(f64, Vec<f64>)> {
        let n = batch.cond.nrows();
        if n == 0 {
            return Err(Error::RejectedInput("empty flow batch".into()));
        }
        let d = self.chunk_dim();
        if batch.cond.ncols() != self.cond_dim {
            return Err(Error::shape("flow condition", self.cond_dim, batch.cond.ncols()));
        }
        if batch.target.ncols() != d || batch.noise.ncols() != d {
            return Err(Error::shape("flow chunk", d, batch.target.ncols()));
        }
        if batch.tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::RejectedInput("flow time outside [0, 1]".into()));
        }
        let mut input = Array2::zeros((n, self.net.input_dim()));
        input.slice_mut(s![.., ..self.cond_dim]).assign(&batch.cond);
        for i in 0..n {
            let tau = batch.tau[i];
            for j in 0..d {
                input[[i, self.cond_dim + j]] =
                    (1.0 - tau) * batch.noise[[i, j]] + tau * batch.target[[i, j]];
            }
            input[[i, self.cond_dim + d]] = tau;
        }
        let trace = self.net.forward_trace(input.view())?;
        let residual = trace.output() - &(&batch.target - &batch.noise);
        let per_sample = residual.map_axis(ndarray::Axis(1), |r| r.dot(&r));
        if let Some(i) = per_sample.iter().position(|l| !l.is_finite()) {
            return Err(Error::numeric("flow loss", Some(i)));
        }
        let loss = per_sample.sum() / n as f64;
        let grad_out = residual * (2.0 / n as f64);
        Ok((loss, self.net.backward(&trace, grad_out.view())))
    }

    /// Integrates from seeded standard-normal noise and clamps each action
    /// dimension to `[lo[k], hi[k]]`.
    pub fn sample(&self, cond: &[f64], seed: u64, lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
        let noise = Self::noise(self.chunk_dim(), seed);
        self.sample_from(cond, noise, lo, hi)
    }

    pub fn sample_from(&self, cond: &[f64], noise: Vec<f64>, lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
        if lo.len() != self.action_dim || hi.len() != self.action_dim {
            return Err(Error::shape("flow action bounds", self.action_dim, lo.len()));
        }
        self.check_dims(cond, &noise)?;
        let mut x = integrate_euler(noise, self.n_integration_steps, |x, tau| self.velocity(cond, x, tau))?;
        for (i, v) in x.iter_mut().enumerate() {
            let k = i % self.action_dim;
            *v = v.clamp(lo[k], hi[k]);
        }
        Ok(x)
    }

    /// Batched sampling: one noise row per condition row.
    pub fn sample_batch(&self, cond: ArrayView2<f64>, noise: Array2<f64>, lo: &[f64], hi: &[f64]) -> Result<Array2<f64>> {
        let n = cond.nrows();
        let d = self.chunk_dim();
        let dt = 1.0 / self.n_integration_steps as f64;
        let mut input = Array2::zeros((n, self.net.input_dim()));
        input.slice_mut(s![.., ..self.cond_dim]).assign(&cond);
        let mut x = noise;
        for k in 0..self.n_integration_steps {
            input.slice_mut(s![.., self.cond_dim..self.cond_dim + d]).assign(&x);
            input.slice_mut(s![.., self.cond_dim + d]).fill(k as f64 * dt);
            let v = self.net.forward_batch(input.view())?;
            x.scaled_add(dt, &v);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("flow trajectory", Some(k)));
            }
        }
        for mut row in x.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                let k = i % self.action_dim;
                *v = v.clamp(lo[k], hi[k]);
            }
        }
        Ok(x)
    }

    pub fn noise(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{Adam, AdamConfig};
    use rand::Rng;

    /// Head whose velocity is the constant `c` everywhere (zero weights, output bias `c`).
    fn constant_head(cond_dim: usize, c: &[f64]) -> FlowHead {
        let mut head = FlowHead::new(cond_dim, c.len(), 1, &[4], 10, 0).unwrap();
        let n = head.net.n_params();
        let p = head.net.params_mut();
        p.iter_mut().for_each(|v| *v = 0.0);
        p[n - c.len()..].copy_from_slice(c);
        head
    }

    #[test]
    fn perfect_field_has_zero_loss() {
        let target = [0.5, -0.2, 0.1];
        let noise = [0.1, 0.3, -1.0];
        let c: Vec<f64> = target.iter().zip(&noise).map(|(t, n)| t - n).collect();
        let head = constant_head(2, &c);
        for tau in [0.0, 0.3, 1.0] {
            assert!(head.flow_loss(&[1.0, 0.0], &target, &noise, tau).unwrap() < 1e-28);
        }
    }

    #[test]
    fn zero_net_unit_displacement_has_unit_loss() {
        let head = constant_head(1, &[0.0, 0.0]);
        let loss = head.flow_loss(&[0.0], &[0.6, 0.8], &[0.0, 0.0], 0.4).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_flow_time_outside_unit_interval() {
        let head = constant_head(1, &[0.0]);
        assert!(head.flow_loss(&[0.0], &[0.0], &[0.0], 1.5).is_err());
        assert!(head.flow_loss(&[0.0], &[0.0], &[0.0], -0.1).is_err());
    }

    #[test]
    fn constant_field_euler_is_exact() {
        let target = vec![0.3, -0.7, 0.2, 0.9];
        for seed in 0..5 {
            let noise = FlowHead::noise(4, seed);
            for steps in [1, 3, 10, 50] {
                let c: Vec<f64> = target.iter().zip(&noise).map(|(t, n)| t - n).collect();
                let x = integrate_euler(noise.clone(), steps, |_, _| Ok(c.clone())).unwrap();
                for (a, b) in x.iter().zip(&target) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_clamped() {
        let head = FlowHead::new(3, 2, 2, &[8], 10, 4).unwrap();
        let a = head.sample(&[0.1, 0.2, 0.3], 9, &[-1.0, 0.0], &[1.0, 0.5]).unwrap();
        let b = head.sample(&[0.1, 0.2, 0.3], 9, &[-1.0, 0.0], &[1.0, 0.5]).unwrap();
        assert_eq!(a, b);
        for (i, v) in a.iter().enumerate() {
            if i % 2 == 0 {
                assert!((-1.0..=1.0).contains(v));
            } else {
                assert!((0.0..=0.5).contains(v));
            }
        }
    }

    #[test]
    fn batch_sampling_matches_single_sampling() {
        let head = FlowHead::new(2, 3, 1, &[8, 8], 7, 2).unwrap();
        let cond = ndarray::array![[0.5, -0.5], [1.0, 0.0]];
        let noise_rows: Vec<Vec<f64>> = (0..2).map(|s| FlowHead::noise(3, s)).collect();
        let noise = Array2::from_shape_vec((2, 3), noise_rows.concat()).unwrap();
        let lo = [-2.0];
        let hi = [2.0];
        let batch = head.sample_batch(cond.view(), noise, &lo, &hi).unwrap();
        for i in 0..2 {
            let single = head.sample_from(cond.row(i).as_slice().unwrap(), noise_rows[i].clone(), &lo, &hi).unwrap();
            for j in 0..3 {
                assert!((batch[[i, j]] - single[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_gradient_matches_pointwise_loss() {
        let head = FlowHead::new(2, 2, 1, &[6], 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4;
        let batch = FlowBatch {
            cond: Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0)),
            target: Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0)),
            noise: Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0)),
            tau: Array1::from_shape_fn(n, |_| rng.gen_range(0.0..1.0)),
        };
        let (loss, _) = head.loss_and_grad(&batch).unwrap();
        let pointwise: f64 = (0..n)
            .map(|i| {
                head.flow_loss(
                    batch.cond.row(i).as_slice().unwrap(),
                    batch.target.row(i).as_slice().unwrap(),
                    batch.noise.row(i).as_slice().unwrap(),
                    batch.tau[i],
                )
                .unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((loss - pointwise).abs() < 1e-12);
    }

    #[test]
    fn trained_head_reproduces_a_single_target() {
        let target = vec![0.4, -0.3, 0.8, 0.0];
        let cond = vec![1.0, -1.0];
        let mut head = FlowHead::new(2, 4, 1, &[32, 32], 10, 7).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 3e-3, ..Default::default() }, head.net.n_params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 32;
        let steps = 8000;
        for k in 0..steps {
            opt.config.lr = 3e-3 * (1.0 - k as f64 / steps as f64) + 1e-5;
            let batch = FlowBatch {
                cond: Array2::from_shape_fn((n, 2), |(_, j)| cond[j]),
                target: Array2::from_shape_fn((n, 4), |(_, j)| target[j]),
                noise: Array2::from_shape_fn((n, 4), |_| StandardNormal.sample(&mut rng)),
                tau: Array1::from_shape_fn(n, |_| rng.gen_range(0.0..=1.0)),
            };
            let (_, g) = head.loss_and_grad(&batch).unwrap();
            opt.step(head.net.params_mut(), &g).unwrap();
        }
        for seed in 0..5 {
            let x = head.sample(&cond, seed, &[-5.0], &[5.0]).unwrap();
            let err: f64 = x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err < 1e-2, "seed {seed}: L2 error {err}");
        }
    }
}
