//! Elementwise activations and row-wise normalization with their derivatives.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Normalizes each row to zero mean and unit variance. Returns `(xhat, 1/std)`.
pub(crate) fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        *inv = s;
    }
    (xhat, inv_std)
}

/// Gradient through [`layer_norm`] given the gradient at `xhat`.
pub(crate) fn layer_norm_backward(dxhat: &Array2<f64>, xhat: &Array2<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let d = xhat.ncols() as f64;
    let mut dx = dxhat.clone();
    for ((mut drow, xrow), &s) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std.iter()) {
        let mean_d = drow.sum() / d;
        let mean_dx = drow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d;
        for (g, &xh) in drow.iter_mut().zip(xrow) {
            *g = s * (*g - mean_d - xh * mean_dx);
        }
    }
    dx
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient at the logits given the gradient at the softmax output.
pub(crate) fn softmax_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut o, p), dp) in out.rows_mut().into_iter().zip(probs.rows()).zip(dprobs.rows()) {
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for ((ov, &pv), &dv) in o.iter_mut().zip(p).zip(dp) {
            *ov = pv * (dv - dot);
        }
    }
    out
}

/// Uniform init with variance `1 / fan_in`.
pub(crate) fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let a = (3.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

pub(crate) fn column_sums(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8);
            assert!((silu_grad(x) - fd(silu, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&ndarray::array![[1000.0, 0.0], [1.0, 2.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let x = ndarray::array![[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -0.5, 0.0]];
        let w = ndarray::array![[0.1, 0.2, -0.3, 0.4], [-0.5, 0.6, 0.7, -0.8]];
        let loss = |x: &Array2<f64>| (&layer_norm(x).0 * &w).sum();
        let (xhat, inv) = layer_norm(&x);
        let dx = layer_norm_backward(&w, &xhat, &inv);
        for i in 0..2 {
            for j in 0..4 {
                let h = 1e-6;
                let mut up = x.clone();
                up[[i, j]] += h;
                let mut dn = x.clone();
                dn[[i, j]] -= h;
                let num = (loss(&up) - loss(&dn)) / (2.0 * h);
                assert!((num - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
