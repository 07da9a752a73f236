use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{softmax_in_place, softmax_jacobian_norm, softmax_jvp, Matrix};
use crate::model::ops::{apply_rope, rms_norm};
use crate::model::{Model, Positional};

/// Depth-factor statistics for the step from layer `i` to layer `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthFactorRow {
    pub layer: usize,
    /// `‖δ_i‖ / ‖x_i‖`
    pub r1: f64,
    /// Root-mean-square of per-row `‖J(A_i)‖_F`.
    pub r2: f64,
    /// `‖J(A_i) δ̂_i‖ / ‖softmax(A_i)‖`, both Frobenius over all rows and heads.
    pub r3: f64,
    /// Largest per-row `‖J(A_i)‖_F`.
    pub r2_max: f64,
    /// `‖δ̂_i‖ / ‖softmax(A_i)‖`
    pub delta_ratio: f64,
    /// Rows where `‖J δ̂‖ ≤ ‖J‖_F ‖δ̂‖` failed (beyond rounding).
    pub row_bound_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthFactorReport {
    pub layers: Vec<DepthFactorRow>,
}

struct Sums {
    r1: f64,
    r2: f64,
    r3: f64,
    r2_max: f64,
    delta_ratio: f64,
    violations: usize,
}

/// First-order expansion of layer `i + 1`'s attention around `x_i`, with
/// `A_i` built from the normalized `x_i`, layer `i + 1`'s queries and the
/// keys layer `i` attended with; `δ̂_i` is the same map applied to the
/// normalized increment. Averaged over `dataset`.
pub fn depth_factor_stats(model: &Model, dataset: &[Vec<usize>]) -> Result<DepthFactorReport> {
    if dataset.is_empty() {
        return Err(Error::Config("depth statistics need at least one sequence".into()));
    }
    let cfg = &model.config;
    let dk = cfg.d_head;
    let scale = 1.0 / (dk as f64).sqrt();
    let n = cfg.n_layers;
    let mut acc: Vec<Option<Sums>> = (1..n).map(|_| None).collect();
    for seq in dataset {
        let trace = model.forward(seq, true)?.trace.expect("trace requested");
        for i in 1..n {
            let keys = match &trace.layers[i - 1].keys {
                Some(k) => k,
                None => continue,
            };
            let x_i = &trace.layers[i - 1].x_in;
            let x_next = &trace.layers[i].x_in;
            let delta = x_next.sub(x_i)?;
            let lw = &model.weights.layers[i];
            let (xn, _) = rms_norm(x_i, &lw.attn_norm, cfg.norm_eps);
            let (xn_next, _) = rms_norm(x_next, &lw.attn_norm, cfg.norm_eps);
            let project = |m: &Matrix| -> Result<Matrix> {
                let mut q = m.matmul(&lw.wq)?;
                if cfg.positional == Positional::Rope {
                    apply_rope(&mut q, dk, 0, false);
                }
                Ok(q)
            };
            let q = project(&xn)?;
            let dq = project(&xn_next.sub(&xn)?)?;

            let (mut jd_sq, mut p_sq, mut j_sq, mut dh_sq) = (0.0, 0.0, 0.0, 0.0);
            let (mut rows, mut j_max, mut violations) = (0usize, 0.0f64, 0usize);
            for h in 0..cfg.n_heads {
                let g = h / cfg.group_size();
                let a = q.cols_range(h * dk, dk).matmul_t(&keys.cols_range(g * dk, dk))?.scale(scale);
                let d = dq.cols_range(h * dk, dk).matmul_t(&keys.cols_range(g * dk, dk))?.scale(scale);
                for t in 0..a.rows() {
                    let mut p = a.row(t)[..=t].to_vec();
                    softmax_in_place(&mut p);
                    let dh = &d.row(t)[..=t];
                    let jv = softmax_jvp(&p, dh);
                    let jn = softmax_jacobian_norm(&p);
                    let jv_n = jv.iter().map(|v| v * v).sum::<f64>();
                    let dh_n = dh.iter().map(|v| v * v).sum::<f64>();
                    if jv_n.sqrt() > jn * dh_n.sqrt() * (1.0 + 1e-12) + 1e-300 {
                        violations += 1;
                    }
                    jd_sq += jv_n;
                    dh_sq += dh_n;
                    p_sq += p.iter().map(|v| v * v).sum::<f64>();
                    j_sq += jn * jn;
                    j_max = j_max.max(jn);
                    rows += 1;
                }
            }
            let p_norm = p_sq.sqrt();
            let s = acc[i - 1].get_or_insert(Sums { r1: 0.0, r2: 0.0, r3: 0.0, r2_max: 0.0, delta_ratio: 0.0, violations: 0 });
            s.r1 += delta.norm() / x_i.norm();
            s.r2 += (j_sq / rows as f64).sqrt();
            s.r3 += jd_sq.sqrt() / p_norm;
            s.r2_max = s.r2_max.max(j_max);
            s.delta_ratio += dh_sq.sqrt() / p_norm;
            s.violations += violations;
        }
    }
    let count = dataset.len() as f64;
    let layers = acc
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            s.map(|s| DepthFactorRow {
                layer: i + 1,
                r1: s.r1 / count,
                r2: s.r2 / count,
                r3: s.r3 / count,
                r2_max: s.r2_max,
                delta_ratio: s.delta_ratio / count,
                row_bound_violations: s.violations,
            })
        })
        .collect();
    Ok(DepthFactorReport { layers })
}
