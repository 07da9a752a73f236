use crate::error::Result;
use crate::linalg::{Matrix, RngStream};
use crate::model::Model;

use super::backward::{loss, loss_and_grads};

/// Floor on the relative-error denominator so vanishing gradients compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn param_mut<'a>(model: &'a mut Model, name: &str) -> &'a mut Matrix {
    if let Some(layer) = name.strip_prefix("wc.") {
        let layer: usize = layer.parse().expect("wc.<layer>");
        let comp = model.compensation.as_mut().expect("model has W_c");
        return comp.entries_mut().find(|(l, _)| **l == layer).expect("known W_c layer").1;
    }
    model
        .weights
        .named_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m)
        .expect("known parameter name")
}

/// Compares analytic gradients with central differences on `n_samples`
/// parameters, visiting tensors round-robin and picking a random entry in each.
pub fn gradcheck(
    model: &Model,
    batch: &[Vec<usize>],
    n_samples: usize,
    step: f64,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, batch)?;
    let named = grads.named();
    let mut samples = Vec::with_capacity(n_samples);
    let mut probe = model.clone();
    for s in 0..n_samples {
        let (name, g) = &named[s % named.len()];
        let index = rng.below(g.data().len());
        let original = param_mut(&mut probe, name).data()[index];
        param_mut(&mut probe, name).data_mut()[index] = original + step;
        let plus = loss(&probe, batch)?;
        param_mut(&mut probe, name).data_mut()[index] = original - step;
        let minus = loss(&probe, batch)?;
        param_mut(&mut probe, name).data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = g.data()[index];
        samples.push(GradSample {
            name: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { samples, max_rel_error })
}
