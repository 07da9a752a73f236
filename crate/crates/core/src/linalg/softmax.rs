use super::Matrix;
use crate::error::{Error, Result};

/// In-place stabilized softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
/// and the masked entries are exactly zero.
pub fn softmax_rows(logits: &Matrix, causal: bool) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    if causal && logits.rows() != logits.cols() {
        return Err(Error::shape(
            "softmax_rows",
            format!("causal mask needs a square input, got {}x{}", logits.rows(), logits.cols()),
        ));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if causal {
            let (live, masked) = row.split_at_mut(i + 1);
            softmax_in_place(live);
            masked.fill(0.0);
        } else {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Jacobian of softmax at probabilities `p`: `diag(p) − p·pᵀ`.
pub fn softmax_jacobian(p: &[f64]) -> Result<Matrix> {
    if p.is_empty() {
        return Err(Error::Contract("softmax_jacobian needs a non-empty vector".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract("softmax_jacobian needs non-negative probabilities".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
    }
    let n = p.len();
    Ok(Matrix::from_fn(n, n, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] }))
}

/// `‖diag(p) − p·pᵀ‖_F` without forming the matrix.
pub fn softmax_jacobian_norm(p: &[f64]) -> f64 {
    let s2: f64 = p.iter().map(|v| v * v).sum();
    let s3: f64 = p.iter().map(|v| v * v * v).sum();
    (s2 - 2.0 * s3 + s2 * s2).max(0.0).sqrt()
}

/// `J(p)·u = p ⊙ (u − ⟨p,u⟩)`.
pub fn softmax_jvp(p: &[f64], u: &[f64]) -> Vec<f64> {
    let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
    p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
}
