//! Multilayer perceptrons with hand-written reverse mode, Adam, diagonal
//! Gaussians and a versioned checkpoint format.
//!
//! Every network stores its parameters in one flat `Vec<f64>` laid out as
//! `[W0, b0, W1, b1, ...]`, each `W` row-major with shape `(in, out)`.
//! Gradients use exactly the same layout, so optimizers can treat parameter
//! and gradient buffers as plain slices.

mod adam;
mod checkpoint;
mod gaussian;

pub use adam::{adam_step, clip_grad_norm, Adam};
pub use checkpoint::{Checkpoint, RngState, Tensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gaussian::{DiagGaussian, LOG_STD_MAX, LOG_STD_MIN};
pub(crate) use gaussian::clamp_log_std;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// A fully connected network; hidden layers share one activation and the
/// output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.activation == other.activation && self.params == other.params
    }
}

/// Intermediates recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// Layer inputs: `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

impl Mlp {
    /// Build with Gaussian weights scaled by `1/sqrt(fan_in)` and zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut params = Vec::with_capacity(Self::count_params(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            activation,
            params,
            version: fresh_version(),
        }
    }

    /// Build from explicit parameters in the flat layout.
    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let expected = Self::count_params(sizes);
        if params.len() != expected {
            return Err(Error::Shape { expected, got: params.len() });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params,
            version: fresh_version(),
        })
    }

    /// `sum (in + 1) * out` over layers.
    pub fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.params
    }

    /// Multiply the last layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n = self.sizes.len();
        let (fan_in, fan_out) = (self.sizes[n - 2], self.sizes[n - 1]);
        let len = (fan_in + 1) * fan_out;
        let start = self.params.len() - len;
        for p in &mut self.params_mut()[start..] {
            *p *= factor;
        }
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(layer) {
            off += (w[0] + 1) * w[1];
        }
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        (off, off + fan_in * fan_out, fan_in, fan_out)
    }

    fn weights(&self, layer: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(layer);
        let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[w_off..b_off]).expect("layout");
        (w, &self.params[b_off..b_off + fan_out])
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: input.ncols() });
        }
        let layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut x = input.to_owned();
        for layer in 0..layers {
            let (w, b) = self.weights(layer);
            let mut z = x.dot(&w);
            for mut row in z.rows_mut() {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            inputs.push(x);
            if layer + 1 < layers {
                let act = self.activation;
                let a = z.mapv(|v| act.apply(v));
                pre.push(z);
                x = a;
            } else {
                x = z;
            }
        }
        Ok((
            x,
            Tape {
                version: self.version,
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass without a tape.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(input)?.0)
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
        let (y, tape) = self.forward(&x)?;
        Ok((y.into_raw_vec_and_offset().0, tape))
    }

    /// Reverse pass. Gradients are *added* into `grads` (flat layout);
    /// the gradient with respect to the input batch is returned.
    pub fn backward(&self, tape: &Tape, output_grad: &Array2<f64>, grads: &mut [f64]) -> Result<Array2<f64>> {
        if tape.version != self.version {
            return Err(Error::Usage("tape is stale: parameters changed since forward".into()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape { expected: self.params.len(), got: grads.len() });
        }
        if output_grad.ncols() != self.output_dim() || output_grad.nrows() != tape.batch_size() {
            return Err(Error::Shape { expected: self.output_dim(), got: output_grad.ncols() });
        }
        let layers = self.sizes.len() - 1;
        let mut delta = output_grad.to_owned();
        for layer in (0..layers).rev() {
            if layer + 1 < layers {
                // delta currently holds dL/da for this hidden layer's output
                let z = &tape.pre[layer];
                let a = &tape.inputs[layer + 1];
                let act = self.activation;
                ndarray::Zip::from(&mut delta).and(z).and(a).for_each(|d, &z, &a| *d *= act.derivative(z, a));
            }
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(layer);
            let x = &tape.inputs[layer];
            let gw = x.t().dot(&delta);
            for (g, v) in grads[w_off..b_off].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grads[b_off..b_off + fan_out].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[w_off..b_off]).expect("layout");
            delta = delta.dot(&w.t());
        }
        Ok(delta)
    }
}

/// Build a batch matrix from rows of equal length.
pub fn batch_from_rows<'a, I>(rows: I, width: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        assert_eq!(row.len(), width, "ragged batch");
        data.extend_from_slice(row);
        n += 1;
    }
    Array2::from_shape_vec((n, width), data).expect("batch shape")
}

/// Central-difference gradient of a scalar function of the flat parameters.
/// Test helper, kept public so integration tests share it.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(params: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
