use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{least_squares, Matrix};
use crate::model::{ForwardTrace, Model, ModelConfig, VariantSpec};

use super::{CompensationMeta, CompensationSet, InitMode, SuperblockPlan};

/// Token sequences forwarded to estimate `E[x]` and `E[ε]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    sequences: Vec<Vec<usize>>,
}

impl CalibrationBatch {
    pub fn new(sequences: Vec<Vec<usize>>) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("calibration batch needs non-empty sequences".into()));
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    /// Total token positions, the instance count `S`.
    pub fn instances(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        match self.sequences.iter().find(|s| s.len() > config.max_seq) {
            Some(s) => Err(Error::Config(format!(
                "calibration sequence of {} tokens exceeds max_seq {}",
                s.len(),
                config.max_seq
            ))),
            None => Ok(()),
        }
    }
}

/// Order in which reusing layers receive their closed-form `W_c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitOrder {
    BottomUp,
    TopDown,
}

/// `ε = x'_ori − x'_uni` at 1-based `layer`.
pub fn compute_epsilon(original: &ForwardTrace, unified: &ForwardTrace, layer: usize) -> Result<Matrix> {
    let get = |t: &ForwardTrace, which: &str| {
        layer
            .checked_sub(1)
            .and_then(|i| t.layers.get(i))
            .map(|lt| lt.x_mid.clone())
            .ok_or_else(|| Error::MissingTrace(format!("{which} trace has no layer {layer}")))
    };
    let ori = get(original, "original")?;
    let uni = get(unified, "unified")?;
    ori.sub(&uni)
}

pub(crate) fn traces(model: &Model, batch: &CalibrationBatch) -> Result<Vec<ForwardTrace>> {
    batch
        .sequences
        .par_iter()
        .map(|s| Ok(model.forward(s, true)?.trace.expect("trace requested")))
        .collect()
}

fn baseline_of(model: &Model) -> Result<Model> {
    model.with_variant(VariantSpec::Baseline, None)
}

fn unified(model: &Model, plan: &SuperblockPlan, comp: Option<CompensationSet>) -> Result<Model> {
    let compensated = comp.is_some();
    model.with_variant(VariantSpec::UniAttn { plan: plan.clone(), compensated }, comp)
}

/// Averages contiguous runs of rows into `v` rows (`v` clamped to the row count).
pub fn group_average(rows: &Matrix, v: usize) -> Matrix {
    let s = rows.rows();
    let v = v.clamp(1, s);
    Matrix::from_fn(v, rows.cols(), |g, j| {
        let (lo, hi) = (g * s / v, (g + 1) * s / v);
        (lo..hi).map(|i| rows[(i, j)]).sum::<f64>() / (hi - lo) as f64
    })
}

/// Closed-form `W_c` for every reusing layer of `plan`, bottom-up.
pub fn init_compensation(
    model: &Model,
    plan: &SuperblockPlan,
    calib: &CalibrationBatch,
    v: usize,
) -> Result<CompensationSet> {
    init_compensation_ordered(model, plan, calib, v, InitOrder::BottomUp)
}

/// As [`init_compensation`], with the layer visiting order made explicit.
/// Each layer is fitted against a fresh trace that includes every `W_c`
/// inserted so far.
pub fn init_compensation_ordered(
    model: &Model,
    plan: &SuperblockPlan,
    calib: &CalibrationBatch,
    v: usize,
    order: InitOrder,
) -> Result<CompensationSet> {
    if v == 0 {
        return Err(Error::Config("v must be at least 1".into()));
    }
    calib.check(&model.config)?;
    let base = baseline_of(model)?;
    let target = base.config.with_variant(VariantSpec::UniAttn { plan: plan.clone(), compensated: true });
    target.validate()?;
    let original = traces(&base, calib)?;

    let mut layers = plan.reusing_layers();
    if order == InitOrder::TopDown {
        layers.reverse();
    }
    let mut comp = CompensationSet::zeros(&target);
    let mut warnings = Vec::new();
    let samples = calib.instances();
    for layer in layers {
        let uni = traces(&unified(&base, plan, Some(comp.clone()))?, calib)?;
        let mut xs = Vec::with_capacity(uni.len());
        let mut eps = Vec::with_capacity(uni.len());
        for (o, u) in original.iter().zip(&uni) {
            xs.push(u.layers[layer - 1].x_in.clone());
            // W_c at this layer is still zero here, so x'_uni excludes it.
            eps.push(compute_epsilon(o, u, layer)?);
        }
        let x_bar = group_average(&Matrix::stack_rows(&xs)?, v);
        let e_bar = group_average(&Matrix::stack_rows(&eps)?, v);
        let wc = if x_bar.max_abs() == 0.0 {
            warnings.push(format!("layer {layer}: averaged activation is zero, kept zero init"));
            Matrix::zeros(target.d_model, target.d_model)
        } else {
            least_squares(&x_bar, &e_bar)?
        };
        if !wc.is_finite() {
            return Err(Error::NonFinite("compensation matrix"));
        }
        comp.insert(layer, wc);
    }
    let entries: BTreeMap<usize, Matrix> = comp.entries().clone();
    Ok(CompensationSet::from_entries(
        entries,
        CompensationMeta { samples, v: v.min(samples), mode: InitMode::ClosedForm, warnings },
    ))
}

/// Unification error at one reusing layer, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerError {
    pub layer: usize,
    pub uncompensated: f64,
    pub compensated: f64,
}

/// Mean `‖ε‖_F` per reusing layer, without and with `comp`.
///
/// Without `comp` both columns report the uncompensated error.
pub fn error_report(
    model: &Model,
    plan: &SuperblockPlan,
    comp: Option<&CompensationSet>,
    eval: &CalibrationBatch,
) -> Result<Vec<LayerError>> {
    eval.check(&model.config)?;
    let layers = plan.reusing_layers();
    if layers.is_empty() {
        return Ok(Vec::new());
    }
    let base = baseline_of(model)?;
    let original = traces(&base, eval)?;
    let mean_err = |m: &Model| -> Result<Vec<f64>> {
        let uni = traces(m, eval)?;
        layers
            .iter()
            .map(|&l| {
                let mut total = 0.0;
                for (o, u) in original.iter().zip(&uni) {
                    total += compute_epsilon(o, u, l)?.norm();
                }
                Ok(total / original.len() as f64)
            })
            .collect()
    };
    let before = mean_err(&unified(&base, plan, None)?)?;
    let after = match comp {
        Some(c) => mean_err(&unified(&base, plan, Some(c.clone()))?)?,
        None => before.clone(),
    };
    Ok(layers
        .into_iter()
        .zip(before.into_iter().zip(after))
        .map(|(layer, (uncompensated, compensated))| LayerError { layer, uncompensated, compensated })
        .collect())
}

/// Mean Frobenius distance between `model`'s logits and the Baseline logits.
pub fn logits_gap(model: &Model, batch: &CalibrationBatch) -> Result<f64> {
    let base = baseline_of(model)?;
    let gaps: Vec<f64> = batch
        .sequences
        .par_iter()
        .map(|s| Ok(model.logits(s)?.sub(&base.logits(s)?)?.norm()))
        .collect::<Result<_>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_average_clamps_and_partitions() {
        let m = Matrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(group_average(&m, 1), m.mean_rows());
        assert_eq!(group_average(&m, 9), m);
        let g = group_average(&m, 2);
        assert_eq!(g.row(0), &[1.0, 2.0]);
        assert_eq!(g.row(1), &[6.0, 7.0]);
    }

    #[test]
    fn calibration_rejects_empty() {
        assert!(CalibrationBatch::new(vec![]).is_err());
        assert!(CalibrationBatch::new(vec![vec![]]).is_err());
        assert_eq!(CalibrationBatch::new(vec![vec![1, 2], vec![3]]).unwrap().instances(), 3);
    }
}
