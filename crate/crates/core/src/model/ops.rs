//! Row-wise building blocks shared by the forward and backward passes.

use crate::linalg::Matrix;

use super::config::ROPE_BASE;

/// RMSNorm with a learned `1 x d` scale. Returns the output and `1/rms` per row.
pub fn rms_norm(x: &Matrix, scale: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(scale.data()) {
            *v *= r * g;
        }
        inv.push(r);
    }
    (out, inv)
}

/// Backward of [`rms_norm`]; accumulates the scale gradient into `dscale`.
pub fn rms_norm_backward(
    dy: &Matrix,
    x: &Matrix,
    inv_rms: &[f64],
    scale: &Matrix,
    dscale: &mut Matrix,
) -> Matrix {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    for (i, &r) in inv_rms.iter().enumerate() {
        let (xr, dyr) = (x.row(i), dy.row(i));
        let mut proj = 0.0;
        for j in 0..d {
            let gdy = dyr[j] * scale.data()[j];
            proj += gdy * xr[j];
            dscale.data_mut()[j] += dyr[j] * xr[j] * r;
        }
        let coef = r * r * r * proj / d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * dyr[j] * scale.data()[j] - coef * xr[j];
        }
    }
    dx
}

/// Rotates each head's halves `(j, j + d_head/2)` by `pos · base^(−2j/d_head)`,
/// with row `i` at position `first_pos + i`. `inverse` applies the transpose.
pub fn apply_rope(m: &mut Matrix, d_head: usize, first_pos: usize, inverse: bool) {
    let half = d_head / 2;
    let heads = m.cols() / d_head;
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..m.rows() {
        let pos = (first_pos + i) as f64;
        let row = m.row_mut(i);
        for h in 0..heads {
            let base = h * d_head;
            for j in 0..half {
                let theta = pos * ROPE_BASE.powf(-2.0 * j as f64 / d_head as f64);
                let (s, c) = (sign * theta).sin_cos();
                let a = row[base + j];
                let b = row[base + j + half];
                row[base + j] = a * c - b * s;
                row[base + j + half] = a * s + b * c;
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
