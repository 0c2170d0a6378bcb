//! Central finite-difference gradients, used to verify backpropagation.

use ndarray::{Array1, ArrayView1, ArrayView2};

use super::mlp::Approximator;
use crate::error::Result;

/// Mean batch loss evaluated through `forward` only.
pub fn batch_loss<F>(net: &Approximator, inputs: ArrayView2<f64>, loss: &F) -> Result<f64>
where
    F: Fn(usize, ArrayView1<f64>) -> (f64, Array1<f64>),
{
    let out = net.forward_batch(inputs)?;
    let total: f64 = out.rows().into_iter().enumerate().map(|(i, r)| loss(i, r).0).sum();
    Ok(total / out.nrows() as f64)
}

/// Central differences of the mean batch loss with respect to every parameter.
pub fn finite_difference<F>(net: &Approximator, inputs: ArrayView2<f64>, loss: F, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(usize, ArrayView1<f64>) -> (f64, Array1<f64>),
{
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(net.n_params());
    for j in 0..net.n_params() {
        let base = net.params()[j];
        probe.params_mut()[j] = base + eps;
        let plus = batch_loss(&probe, inputs, &loss)?;
        probe.params_mut()[j] = base - eps;
        let minus = batch_loss(&probe, inputs, &loss)?;
        probe.params_mut()[j] = base;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest relative error `|a − b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
