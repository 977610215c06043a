//! Small dense building blocks with explicit backward passes.
//!
//! Matrices are row-per-channel: an input of shape `[N x in]` maps to
//! `[N x out]`. Every `*_backward` returns the gradient with respect to the
//! layer input and accumulates parameter gradients into a caller-owned buffer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

/// Variance floor inside the channel layer norm.
pub const NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Affine map `y = x W + b` with `W: [in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization for weight and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform_matrix(input, output, bound, rng),
            bias: Array1::from_shape_fn(output, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Normalizes each column across the channel axis (rows): subtract the
/// cross-channel mean, divide by `sqrt(var + NORM_EPS)`. Returns the output
/// and the per-column inverse stddev needed by the backward pass.
pub fn channel_layernorm(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    (centered * &inv_std, inv_std)
}

pub fn channel_layernorm_backward(
    y: ArrayView2<f64>,
    inv_std: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    let n = y.nrows() as f64;
    let mean_dy = dy.sum_axis(Axis(0)) / n;
    let mean_dy_y = (&dy * &y).sum_axis(Axis(0)) / n;
    (&dy - &mean_dy - &(&y * &mean_dy_y)) * &inv_std
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Backward of row-wise softmax: `da = w * (dw - rowsum(w * dw))`.
pub fn softmax_rows_backward(w: ArrayView2<f64>, dw: ArrayView2<f64>) -> Array2<f64> {
    let dot = (&w * &dw).sum_axis(Axis(1)).insert_axis(Axis(1));
    &w * &(&dw - &dot)
}

/// Log of `sum(exp(row))`, stable for large entries.
pub fn logsumexp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}
