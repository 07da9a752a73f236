use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{least_squares, softmax_in_place, softmax_jacobian, softmax_jacobian_norm, svd, Matrix, RngStream};
use crate::model::{LayerRole, Model};

/// One numeric check: what was expected, what came out, and whether it passed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryCheck {
    pub name: String,
    /// Where `expected` comes from (closed form, published estimate, bound, ...).
    pub basis: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
}

impl TheoryReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Monte-Carlo mean of `min_X ‖AX − B‖²_F` for Gaussian `A, B ∈ R^{m×n}`
/// against `n(m − n)` (0 when `m < n`).
pub fn verify_theorem_e1(m: usize, n: usize, trials: usize, rng: &mut RngStream) -> Result<TheoryCheck> {
    if trials < 100 {
        return Err(Error::Config(format!("at least 100 trials needed, got {trials}")));
    }
    let mut residuals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let a = rng.gaussian_matrix(m, n);
        let b = rng.gaussian_matrix(m, n);
        let x = least_squares(&a, &b)?;
        residuals.push(a.matmul(&x)?.sub(&b)?.norm_sq());
    }
    let mean = residuals.iter().sum::<f64>() / trials as f64;
    let max = residuals.iter().cloned().fold(0.0, f64::max);
    let (expected, tolerance, pass, basis) = if m > n {
        let e = (n * (m - n)) as f64;
        (e, 0.05, ((mean - e) / e).abs() <= 0.05, "closed form n(m-n), 5% relative")
    } else {
        let tol = if m < n { 1e-18 } else { 1e-16 };
        (0.0, tol, max < tol, "exact fit, every trial below tolerance")
    };
    Ok(TheoryCheck {
        name: format!("least-squares residual m={m} n={n}"),
        basis: basis.into(),
        expected,
        observed: mean,
        tolerance,
        pass,
        notes: vec![format!("trials={trials}"), format!("max residual={max:.2e}")],
    })
}

/// Attention-sink logits: the first `d` positions get 1, the rest −1.
pub fn sink_probabilities(l: usize, d: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..l).map(|i| if i < d { 1.0 } else { -1.0 }).collect();
    softmax_in_place(&mut p);
    p
}

/// `‖J(softmax(a))‖_F` at the sink pattern.
pub fn jacobian_sink_norm(l: usize, d: usize) -> f64 {
    softmax_jacobian_norm(&sink_probabilities(l, d))
}

/// Sink-pattern Jacobian norm at `l` within `[0.02, 0.04]`, and non-increasing over `sweep`.
pub fn verify_jacobian_sink(l: usize, d: usize, sweep: &[usize]) -> Result<TheoryCheck> {
    if d >= l {
        return Err(Error::Config(format!("sink width {d} must be below length {l}")));
    }
    let observed = jacobian_sink_norm(l, d);
    let mut notes = Vec::new();
    if l <= 2048 {
        let direct = softmax_jacobian(&sink_probabilities(l, d))?.norm();
        notes.push(format!("dense Jacobian norm={direct:.6}"));
    }
    let norms: Vec<f64> = sweep.iter().map(|&n| jacobian_sink_norm(n, d)).collect();
    let monotone = norms.windows(2).all(|w| w[1] <= w[0]);
    for (n, v) in sweep.iter().zip(&norms) {
        notes.push(format!("l={n}: {v:.6}"));
    }
    Ok(TheoryCheck {
        name: format!("sink Jacobian l={l} d={d}"),
        basis: "published estimate 0.03, accepted band [0.02, 0.04], non-increasing in l".into(),
        expected: 0.03,
        observed,
        tolerance: 0.01,
        pass: (0.02..=0.04).contains(&observed) && monotone,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthRun {
    pub final_norm: f64,
    pub bound: f64,
    pub slack: f64,
}

fn unit(x: &Matrix) -> Matrix {
    x.scale(1.0 / x.norm())
}

fn iterate_growth(x0: &Matrix, maps: &[Matrix], lambda: f64) -> Result<GrowthRun> {
    let mut x = x0.clone();
    for f in maps {
        let step = unit(&x).matmul(f)?;
        x.add_assign(&step)?;
    }
    let bound = x0.norm() + lambda * maps.len() as f64;
    let final_norm = x.norm();
    Ok(GrowthRun { final_norm, bound, slack: bound - final_norm })
}

/// `x_k = x_{k−1} + Norm(x_{k−1}) F_k` with unit-Frobenius `Norm` and Gaussian
/// `F_k` rescaled to top singular value `lambda`.
pub fn simulate_growth(layers: usize, lambda: f64, d: usize, rng: &mut RngStream) -> Result<GrowthRun> {
    let x0 = rng.gaussian_matrix(1, d);
    let maps = (0..layers)
        .map(|_| {
            let f = rng.gaussian_matrix(d, d);
            let top = svd(&f)?.sigma[0];
            Ok(f.scale(lambda / top))
        })
        .collect::<Result<Vec<_>>>()?;
    iterate_growth(&x0, &maps, lambda)
}

/// Every map projects onto the direction of `x_0` with gain `lambda`, the
/// configuration that makes the bound tight.
pub fn simulate_aligned_growth(layers: usize, lambda: f64, d: usize, rng: &mut RngStream) -> Result<GrowthRun> {
    let x0 = rng.gaussian_matrix(1, d);
    let u = unit(&x0);
    let proj = u.t_matmul(&u)?.scale(lambda);
    iterate_growth(&x0, &vec![proj; layers], lambda)
}

/// `‖x_L‖ ≤ ‖x_0‖ + λL` over `systems` random Pre-Norm linear systems.
pub fn verify_bounded_growth(
    layers: usize,
    lambda: f64,
    d: usize,
    systems: usize,
    rng: &mut RngStream,
) -> Result<TheoryCheck> {
    if layers == 0 || systems == 0 {
        return Err(Error::Config("bounded growth needs at least one layer and one system".into()));
    }
    let tol = 1e-9;
    let mut min_slack = f64::INFINITY;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..systems {
        let run = simulate_growth(layers, lambda, d, rng)?;
        min_slack = min_slack.min(run.slack);
        worst_ratio = worst_ratio.max(run.final_norm / run.bound);
    }
    let aligned = simulate_aligned_growth(layers, lambda, d, rng)?;
    let pass = min_slack >= -tol * (1.0 + lambda * layers as f64) && aligned.slack >= -tol * aligned.bound;
    Ok(TheoryCheck {
        name: format!("bounded growth L={layers} lambda={lambda} d={d}"),
        basis: "upper bound ||x_0|| + lambda L, reported as max ||x_L|| / bound".into(),
        expected: 1.0,
        observed: worst_ratio,
        tolerance: tol,
        pass,
        notes: vec![
            format!("systems={systems}"),
            format!("min slack={min_slack:.6}"),
            format!("aligned maps: ||x_L||={:.6} bound={:.6}", aligned.final_norm, aligned.bound),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthRatioRow {
    pub layer: usize,
    /// Mean over included sequences of `(‖s x W_v W_o‖ / ‖s δ W_v W_o‖) / (‖x‖ / ‖δ‖)`.
    pub ratio_of_ratios: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Output norm of `s (m W_v) W_o` for every head of a probability-reusing layer.
fn reuse_output(model: &Model, probs: &[Matrix], m: &Matrix, layer: usize) -> Result<Matrix> {
    let cfg = &model.config;
    let lw = &model.weights.layers[layer];
    let dk = cfg.d_head;
    let v = m.matmul(&lw.wv)?;
    let mut concat = Matrix::zeros(m.rows(), cfg.d_model);
    for (h, p) in probs.iter().enumerate() {
        let g = h / cfg.group_size();
        concat.add_cols_range(h * dk, &p.matmul(&v.cols_range(g * dk, dk))?);
    }
    concat.matmul(&lw.wo)
}

/// For each probability-reusing layer `j`, with `x = x_{j−1}` and
/// `δ = x_j − x_{j−1}`, how far reuse changes the relative size of `δ`.
/// Sequences with `δ = 0` are excluded.
pub fn uniattn_depth_ratio(model: &Model, dataset: &[Vec<usize>]) -> Result<Vec<DepthRatioRow>> {
    let roles = model.config.roles();
    let reusing: Vec<(usize, usize)> = roles
        .iter()
        .enumerate()
        .filter_map(|(l, r)| match r {
            LayerRole::SharedProbs { bottom } => Some((l, *bottom)),
            _ => None,
        })
        .collect();
    if reusing.is_empty() {
        return Err(Error::Contract("depth ratio needs a variant with probability-reusing layers".into()));
    }
    let mut rows: Vec<DepthRatioRow> = reusing
        .iter()
        .map(|&(l, _)| DepthRatioRow { layer: l + 1, ratio_of_ratios: 0.0, included: 0, excluded: 0 })
        .collect();
    for seq in dataset {
        let trace = model.forward(seq, true)?.trace.expect("trace requested");
        for (row, &(l, bottom)) in rows.iter_mut().zip(&reusing) {
            let probs = trace.layers[bottom].probs.as_ref().expect("bottom layer records probabilities");
            let x = &trace.layers[l - 1].x_in;
            let delta = trace.layers[l].x_in.sub(x)?;
            let num = reuse_output(model, probs, x, l)?.norm();
            let den = reuse_output(model, probs, &delta, l)?.norm();
            if delta.norm() == 0.0 || den == 0.0 {
                row.excluded += 1;
                continue;
            }
            row.ratio_of_ratios += (num / den) / (x.norm() / delta.norm());
            row.included += 1;
        }
    }
    for row in &mut rows {
        if row.included > 0 {
            row.ratio_of_ratios /= row.included as f64;
        } else {
            row.ratio_of_ratios = f64::NAN;
        }
    }
    Ok(rows)
}

/// Logs the ratio-of-ratios; passes when every included value is finite.
pub fn verify_uniattn_depth_ratio(model: &Model, dataset: &[Vec<usize>]) -> Result<TheoryCheck> {
    let rows = uniattn_depth_ratio(model, dataset)?;
    let included: Vec<&DepthRatioRow> = rows.iter().filter(|r| r.included > 0).collect();
    let mean = included.iter().map(|r| r.ratio_of_ratios).sum::<f64>() / included.len().max(1) as f64;
    Ok(TheoryCheck {
        name: "reuse depth ratio".into(),
        basis: "claimed close to 1; logged only, pass requires finite values".into(),
        expected: 1.0,
        observed: mean,
        tolerance: f64::INFINITY,
        pass: !included.is_empty() && included.iter().all(|r| r.ratio_of_ratios.is_finite()),
        notes: rows
            .iter()
            .map(|r| format!("layer {}: {:.4} ({} included, {} excluded)", r.layer, r.ratio_of_ratios, r.included, r.excluded))
            .collect(),
    })
}
