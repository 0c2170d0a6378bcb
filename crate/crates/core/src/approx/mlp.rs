use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A feed-forward regressor with `tanh` hidden layers and a linear output.
///
/// Parameters live in one flat vector. For each layer `l` with `in_l` inputs
/// and `out_l` outputs the layout is the weight matrix `W_l` (`in_l × out_l`,
/// row-major, so `W_l[i][o]` sits at `i * out_l + o`) followed by the bias
/// `b_l` (`out_l`). Layers are stored first to last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Approximator {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer, input first.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace holds at least the input")
    }
}

pub(crate) fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Approximator {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::from_params(layer_sizes, vec![0.0; param_count(layer_sizes)])
    }

    /// Uniform `(-s, s)` initialization with `s = 1/sqrt(fan_in)` for weights and biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for w in layer_sizes.windows(2) {
            let s = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[off..off + w[0] * w[1] + w[1]] {
                *p = rng.gen_range(-s..s);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes {layer_sizes:?} need >= 2 non-zero entries"
            )));
        }
        let expected = param_count(layer_sizes);
        if params.len() != expected {
            return Err(Error::shape("approximator parameters", expected, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("approximator parameters", None));
        }
        Ok(Approximator {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        let mut off = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = ArrayView2::from_shape((n_in, n_out), &self.params[off..off + n_in * n_out])
                .expect("layout matches layer sizes");
            let bias = ArrayView1::from(&self.params[off + n_in * n_out..off + n_in * n_out + n_out]);
            off += n_in * n_out + n_out;
            (weights, bias)
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("approximator input", self.input_dim(), x.ncols()));
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut a = x.to_owned();
        for (l, (w, b)) in self.layers().enumerate() {
            let mut z = a.dot(&w);
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("approximator input", self.input_dim(), x.ncols()));
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_owned());
        for (l, (w, b)) in self.layers().enumerate() {
            let mut z = activations[l].dot(&w);
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `grad_out` (∂loss/∂output, one row per sample) and returns
    /// ∂loss/∂params summed over the batch.
    pub fn backward(&self, trace: &Trace, grad_out: ArrayView2<f64>) -> Vec<f64> {
        self.backward_impl(trace, grad_out, false).0
    }

    /// Like [`backward`](Self::backward) and also returns ∂loss/∂input.
    pub fn backward_with_input(&self, trace: &Trace, grad_out: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let (g, gi) = self.backward_impl(trace, grad_out, true);
        (g, gi.expect("input gradient requested"))
    }

    fn backward_impl(
        &self,
        trace: &Trace,
        grad_out: ArrayView2<f64>,
        want_input: bool,
    ) -> (Vec<f64>, Option<Array2<f64>>) {
        let mut grads = vec![0.0; self.params.len()];
        let layers: Vec<_> = self.layers().collect();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = grad_out.to_owned();
        let mut input_grad = None;
        for l in (0..layers.len()).rev() {
            let (w, _) = layers[l];
            let (n_in, n_out) = (w.nrows(), w.ncols());
            let a_prev = &trace.activations[l];
            let dw = a_prev.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let o = offsets[l];
            grads[o..o + n_in * n_out]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, d)| *g = *d);
            grads[o + n_in * n_out..o + n_in * n_out + n_out]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, d)| *g = *d);
            if l > 0 || want_input {
                let mut back = delta.dot(&w.t());
                if l > 0 {
                    ndarray::Zip::from(&mut back)
                        .and(a_prev)
                        .for_each(|g, &a| *g *= 1.0 - a * a);
                    delta = back;
                } else {
                    input_grad = Some(back);
                }
            }
        }
        (grads, input_grad)
    }
}

/// Mean loss and mean parameter gradient over a batch.
///
/// `loss` maps `(row index, network output row)` to the per-sample loss and
/// its gradient with respect to that output row.
pub fn gradient<F>(net: &Approximator, inputs: ArrayView2<f64>, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, ArrayView1<f64>) -> (f64, Array1<f64>),
{
    let trace = net.forward_trace(inputs)?;
    let out = trace.output();
    let n = out.nrows();
    if n == 0 {
        return Err(Error::RejectedInput("empty batch".into()));
    }
    let mut grad_out = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let (l, g) = loss(i, out.row(i));
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("loss", Some(i)));
        }
        total += l;
        grad_out.slice_mut(s![i, ..]).assign(&(g / n as f64));
    }
    Ok((total / n as f64, net.backward(&trace, grad_out.view())))
}
