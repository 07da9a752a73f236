use super::matrix::dot;
use super::Matrix;
use crate::error::{Error, Result};

/// Default relative truncation for [`pseudoinverse`].
pub const DEFAULT_PINV_RTOL: f64 = 1e-12;

/// Rotation threshold on `|⟨u_p,u_q⟩| / (‖u_p‖‖u_q‖)`.
const JACOBI_TOL: f64 = 1e-13;

/// Thin SVD `m = u · diag(sigma) · vᵀ` with `r = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v).expect("svd factors are conformant")
    }

    /// Number of singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let cutoff = self.sigma.first().copied().unwrap_or(0.0) * rel_tol;
        self.sigma.iter().filter(|&&s| s > cutoff && s > 0.0).count()
    }
}

/// One-sided Jacobi SVD.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd"));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(SvdResult { u: t.v, sigma: t.sigma, v: t.u });
    }
    let (rows, n) = m.shape();
    // Columns of the working matrix are kept as rows for contiguous access.
    let mut w = m.transpose();
    let mut v = Matrix::identity(n);
    let max_sweeps = 10 * rows.max(n);

    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(w.row(p), w.row(p));
                let beta = dot(w.row(q), w.row(q));
                let gamma = dot(w.row(p), w.row(q));
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { op: "svd", iterations: max_sweeps });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| dot(w.row(j), w.row(j)).sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (&j, &s) in order.iter().zip(&sigma) {
        v_cols.push(v.row(j).to_vec());
        if s > smax * 1e-15 && s > 0.0 {
            u_cols.push(w.row(j).iter().map(|x| x / s).collect());
        } else {
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, rows);

    let u = Matrix::from_fn(rows, n, |i, k| u_cols[k][i]);
    let v = Matrix::from_fn(n, n, |i, k| v_cols[k][i]);
    Ok(SvdResult { u, sigma, v })
}

/// Applies the Givens rotation to rows `p` and `q`.
fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills empty vectors with unit vectors orthogonal to all others
/// (Gram–Schmidt over the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut basis_idx = 0;
    for k in 0..cols.len() {
        if !cols[k].is_empty() {
            continue;
        }
        loop {
            assert!(basis_idx < dim, "ran out of basis vectors");
            let mut cand = vec![0.0; dim];
            cand[basis_idx] = 1.0;
            basis_idx += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-8 {
                cand.iter_mut().for_each(|c| *c /= norm);
                cols[k] = cand;
                break;
            }
        }
    }
}

/// Moore–Penrose pseudoinverse `V·Σ⁺·Uᵀ`, truncating `σ ≤ rel_tol·σ_max`.
pub fn pseudoinverse(m: &Matrix, rel_tol: f64) -> Result<Matrix> {
    let svd = svd(m)?;
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    let cutoff = rel_tol.max(0.0) * smax;
    let mut vs = svd.v.clone();
    for i in 0..vs.rows() {
        for (x, &s) in vs.row_mut(i).iter_mut().zip(&svd.sigma) {
            *x = if s > cutoff && s > 0.0 { *x / s } else { 0.0 };
        }
    }
    vs.matmul_t(&svd.u)
}

/// Minimum-norm minimizer of `‖a·X − b‖_F`, i.e. `a⁺·b`.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "least_squares",
            format!("a has {} rows, b has {}", a.rows(), b.rows()),
        ));
    }
    pseudoinverse(a, DEFAULT_PINV_RTOL)?.matmul(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;

    #[test]
    fn identity_and_diag() {
        let s = svd(&Matrix::identity(4)).unwrap();
        assert!(s.sigma.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let s = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_matrix_pinv_is_transposed_zero() {
        let p = pseudoinverse(&Matrix::zeros(3, 5), DEFAULT_PINV_RTOL).unwrap();
        assert_eq!(p.shape(), (5, 3));
        assert_eq!(p.max_abs(), 0.0);
        let s = svd(&Matrix::zeros(3, 5)).unwrap();
        let utu = s.u.t_matmul(&s.u).unwrap();
        assert!(utu.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn pinv_identity() {
        let p = pseudoinverse(&Matrix::identity(5), DEFAULT_PINV_RTOL).unwrap();
        assert!(p.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn least_squares_square_and_self() {
        let mut rng = RngStream::new(11);
        let a = rng.gaussian_matrix(5, 5);
        let x_true = rng.gaussian_matrix(5, 2);
        let b = a.matmul(&x_true).unwrap();
        let x = least_squares(&a, &b).unwrap();
        assert!(x.sub(&x_true).unwrap().max_abs() < 1e-9);

        let tall = rng.gaussian_matrix(9, 4);
        let x = least_squares(&tall, &tall).unwrap();
        assert!(x.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-10);
        assert!(least_squares(&tall, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        // Matrix::new already refuses NaN, so build one through data_mut.
        let mut m = Matrix::zeros(2, 2);
        m.data_mut()[0] = f64::INFINITY;
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
    }
}
