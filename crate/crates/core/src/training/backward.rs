use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ops::{apply_rope, rms_norm_backward, silu, silu_grad};
use crate::model::{LayerRole, Model, Positional, Tape, Weights};

/// Gradients congruent with a model's parameters, `W_c` entries included.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    pub weights: Weights,
    pub wc: BTreeMap<usize, Matrix>,
}

impl GradStore {
    pub fn zeros(model: &Model) -> Self {
        let wc = model
            .compensation
            .iter()
            .flat_map(|c| c.entries().iter())
            .map(|(&l, m)| (l, Matrix::zeros(m.rows(), m.cols())))
            .collect();
        Self { weights: Weights::zeros_like(&model.config), wc }
    }

    /// All gradient tensors by parameter name (`wc.<layer>` last).
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.weights.named();
        out.extend(self.wc.iter().map(|(l, m)| (format!("wc.{l}"), m)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.weights.named_mut().into_iter().map(|(_, m)| m).collect();
        out.extend(self.wc.values_mut());
        out
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &GradStore) -> Result<()> {
        let src: Vec<&Matrix> = other.named().into_iter().map(|(_, m)| m).collect();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("GradStore::add_scaled", "parameter sets differ"));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.axpy(alpha, s)?;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.named().iter().map(|(_, m)| m.norm_sq()).sum::<f64>().sqrt()
    }
}

/// Mean next-token cross-entropy of one sequence and `dL/dlogits`.
fn cross_entropy(logits: &Matrix, tokens: &[usize]) -> (f64, Matrix) {
    let t = tokens.len();
    let n = (t - 1) as f64;
    let mut dlogits = Matrix::zeros(t, logits.cols());
    let mut loss = 0.0;
    for i in 0..t - 1 {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let target = tokens[i + 1];
        loss += z.ln() + m - row[target];
        for (j, g) in dlogits.row_mut(i).iter_mut().enumerate() {
            *g = (row[j] - m).exp() / z / n;
        }
        dlogits.row_mut(i)[target] -= 1.0 / n;
    }
    (loss / n, dlogits)
}

fn tape_for(model: &Model, tokens: &[usize]) -> Result<Tape> {
    model.forward_tape(tokens).map_err(|e| match e {
        Error::NonFiniteActivation { layer } => Error::NanLoss { layer: Some(layer) },
        other => other,
    })
}

fn unrope(model: &Model, mut m: Matrix) -> Matrix {
    if model.config.positional == Positional::Rope {
        apply_rope(&mut m, model.config.d_head, 0, true);
    }
    m
}

/// Row-wise backward of a causal softmax, already divided by `√d_k`.
fn softmax_backward(p: &Matrix, dp: &Matrix, scale: f64) -> Matrix {
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let (pr, dr) = (p.row(i), dp.row(i));
        let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
            *o = pr[j] * (dr[j] - inner) * scale;
        }
    }
    ds
}

fn sequence_grads(model: &Model, tokens: &[usize]) -> Result<(f64, GradStore)> {
    let tape = tape_for(model, tokens)?;
    let (loss, dlogits) = cross_entropy(&tape.logits, tokens);
    if !loss.is_finite() {
        return Err(Error::NanLoss { layer: None });
    }
    let cfg = &model.config;
    let w = &model.weights;
    let mut g = GradStore::zeros(model);
    let dk = cfg.d_head;
    let group = cfg.group_size();
    let scale = 1.0 / (dk as f64).sqrt();

    g.weights.unembed.add_assign(&tape.final_xn.t_matmul(&dlogits)?)?;
    let dxn = dlogits.matmul_t(&w.unembed)?;
    let last = &tape.layers.last().expect("at least one layer").x_out;
    let mut dx = rms_norm_backward(&dxn, last, &tape.final_inv_rms, &w.final_norm, &mut g.weights.final_norm);

    let n = cfg.n_layers;
    // Adjoints flowing back into bottom layers from the layers that share with them.
    let mut dprobs: Vec<Option<Vec<Matrix>>> = vec![None; n];
    let mut dk_shared: Vec<Option<Matrix>> = vec![None; n];
    let mut dv_shared: Vec<Option<Matrix>> = vec![None; n];

    for l in (0..n).rev() {
        let lt = &tape.layers[l];
        let lw = &w.layers[l];
        let gl = &mut g.weights.layers[l];

        let f = &lt.ffn;
        let d_act = dx.matmul_t(&lw.w_down)?;
        gl.w_down.add_assign(&f.act.t_matmul(&dx)?)?;
        let d_gate = Matrix::from_fn(d_act.rows(), d_act.cols(), |i, j| {
            d_act[(i, j)] * f.up[(i, j)] * silu_grad(f.gate[(i, j)])
        });
        let d_up = Matrix::from_fn(d_act.rows(), d_act.cols(), |i, j| d_act[(i, j)] * silu(f.gate[(i, j)]));
        gl.w_gate.add_assign(&f.xn.t_matmul(&d_gate)?)?;
        gl.w_up.add_assign(&f.xn.t_matmul(&d_up)?)?;
        let mut d_fxn = d_gate.matmul_t(&lw.w_gate)?;
        d_fxn.add_assign(&d_up.matmul_t(&lw.w_up)?)?;
        let mut dx_mid = dx;
        dx_mid.add_assign(&rms_norm_backward(&d_fxn, &lt.x_mid, &f.inv_rms, &lw.ffn_norm, &mut gl.ffn_norm))?;

        let mut dx_in = dx_mid.clone();
        if let Some(wc) = model.compensation.as_ref().and_then(|c| c.get(l + 1)) {
            g.wc.get_mut(&(l + 1)).expect("grad store mirrors W_c").add_assign(&lt.x_in.t_matmul(&dx_mid)?)?;
            dx_in.add_assign(&dx_mid.matmul_t(wc)?)?;
        }

        if let Some(a) = &lt.attn {
            gl.wo.add_assign(&a.concat.t_matmul(&dx_mid)?)?;
            let d_concat = dx_mid.matmul_t(&lw.wo)?;
            let seq = lt.x_in.rows();
            let mut dv = Matrix::zeros(seq, cfg.kv_width());
            let mut dq = Matrix::zeros(seq, cfg.d_model);
            let mut dkey = Matrix::zeros(seq, cfg.kv_width());
            let mut own_dprobs = Vec::with_capacity(cfg.n_heads);
            for (h, p) in a.probs.iter().enumerate() {
                let gi = h / group;
                let dch = d_concat.cols_range(h * dk, dk);
                let vg = a.v.cols_range(gi * dk, dk);
                dv.add_cols_range(gi * dk, &p.t_matmul(&dch)?);
                let mut dp = dch.matmul_t(&vg)?;
                if let Some(acc) = &dprobs[l] {
                    dp.add_assign(&acc[h])?;
                }
                own_dprobs.push(dp);
            }
            if let LayerRole::SharedProbs { bottom } = lt.role {
                match &mut dprobs[bottom] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&own_dprobs) {
                            a.add_assign(d)?;
                        }
                    }
                    slot => *slot = Some(own_dprobs),
                }
            } else {
                let q = a.q.as_ref().expect("softmax layer has queries");
                let k = a.k.as_ref().expect("softmax layer has keys");
                for (h, (p, dp)) in a.probs.iter().zip(&own_dprobs).enumerate() {
                    let gi = h / group;
                    let ds = softmax_backward(p, dp, scale);
                    dq.add_cols_range(h * dk, &ds.matmul(&k.cols_range(gi * dk, dk))?);
                    dkey.add_cols_range(gi * dk, &ds.t_matmul(&q.cols_range(h * dk, dk))?);
                }
            }

            let mut d_xn = Matrix::zeros(seq, cfg.d_model);
            match lt.role {
                LayerRole::Full => {
                    if let Some(extra) = dk_shared[l].take() {
                        dkey.add_assign(&extra)?;
                    }
                    if let Some(extra) = dv_shared[l].take() {
                        dv.add_assign(&extra)?;
                    }
                    let dq = unrope(model, dq);
                    let dkey = unrope(model, dkey);
                    gl.wq.add_assign(&a.xn.t_matmul(&dq)?)?;
                    gl.wk.add_assign(&a.xn.t_matmul(&dkey)?)?;
                    gl.wv.add_assign(&a.xn.t_matmul(&dv)?)?;
                    d_xn.add_assign(&dq.matmul_t(&lw.wq)?)?;
                    d_xn.add_assign(&dkey.matmul_t(&lw.wk)?)?;
                    d_xn.add_assign(&dv.matmul_t(&lw.wv)?)?;
                }
                LayerRole::SharedKv { bottom } => {
                    for (slot, d) in [(&mut dk_shared[bottom], dkey), (&mut dv_shared[bottom], dv)] {
                        match slot {
                            Some(acc) => acc.add_assign(&d)?,
                            None => *slot = Some(d),
                        }
                    }
                    let dq = unrope(model, dq);
                    gl.wq.add_assign(&a.xn.t_matmul(&dq)?)?;
                    d_xn.add_assign(&dq.matmul_t(&lw.wq)?)?;
                }
                LayerRole::SharedProbs { .. } => {
                    gl.wv.add_assign(&a.xn.t_matmul(&dv)?)?;
                    d_xn.add_assign(&dv.matmul_t(&lw.wv)?)?;
                }
                LayerRole::Dropped => unreachable!("dropped layers have no attention tape"),
            }
            dx_in.add_assign(&rms_norm_backward(&d_xn, &lt.x_in, &a.inv_rms, &lw.attn_norm, &mut gl.attn_norm))?;
        }
        dx = dx_in;
    }

    for (i, &t) in tokens.iter().enumerate() {
        for (e, d) in g.weights.embed.row_mut(t).iter_mut().zip(dx.row(i)) {
            *e += d;
        }
    }
    Ok((loss, g))
}

fn check_batch(batch: &[Vec<usize>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    if batch.iter().any(|s| s.len() < 2) {
        return Err(Error::Config("training sequences need at least two tokens".into()));
    }
    Ok(())
}

/// Mean next-token cross-entropy over `batch` (each sequence weighted equally).
pub fn loss(model: &Model, batch: &[Vec<usize>]) -> Result<f64> {
    check_batch(batch)?;
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|s| {
            let tape = tape_for(model, s)?;
            let (l, _) = cross_entropy(&tape.logits, s);
            if l.is_finite() {
                Ok(l)
            } else {
                Err(Error::NanLoss { layer: None })
            }
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and reverse-mode gradients for every parameter, `W_c` included.
pub fn loss_and_grads(model: &Model, batch: &[Vec<usize>]) -> Result<(f64, GradStore)> {
    check_batch(batch)?;
    model.validate()?;
    let parts: Vec<(f64, GradStore)> = batch.par_iter().map(|s| sequence_grads(model, s)).collect::<Result<_>>()?;
    let inv = 1.0 / parts.len() as f64;
    let mut total = GradStore::zeros(model);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l * inv;
        total.add_scaled(inv, g)?;
    }
    Ok((loss, total))
}
