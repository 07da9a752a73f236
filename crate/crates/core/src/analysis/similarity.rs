use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cosine_sim, Matrix};
use crate::model::{LayerRole, Model};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSimilarity {
    /// 1-based layer `i ≥ 2`, compared against layer `i − 1`.
    pub layer: usize,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub layers: Vec<LayerSimilarity>,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Mean over the upper half of the layers minus mean over the lower half.
    pub top_minus_bottom: f64,
}

impl SimilarityReport {
    pub fn from_values(layers: Vec<LayerSimilarity>) -> Self {
        let v: Vec<f64> = layers.iter().map(|l| l.sim).collect();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let half = v.len() / 2;
        let avg = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
        let top_minus_bottom = avg(&v[v.len() - half..]) - avg(&v[..half]);
        Self {
            mean,
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            std,
            top_minus_bottom,
            layers,
        }
    }
}

/// Causal (lower-triangular, diagonal included) entries of every head, head-major.
pub fn flatten_causal(probs: &[Matrix]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in probs {
        for i in 0..p.rows() {
            out.extend_from_slice(&p.row(i)[..=i.min(p.cols() - 1)]);
        }
    }
    out
}

/// `Sim(i) = cos(s_i, s_{i−1})` per layer, averaged over `dataset`.
pub fn similarity_profile(model: &Model, dataset: &[Vec<usize>]) -> Result<SimilarityReport> {
    if model.config.roles().iter().any(|r| *r != LayerRole::Full) {
        return Err(Error::Contract(format!(
            "similarity profiling needs every layer to compute its own Softmax, got variant {}",
            model.config.variant.name()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Config("similarity profiling needs at least one sequence".into()));
    }
    let n = model.config.n_layers;
    let mut sums = vec![0.0; n.saturating_sub(1)];
    for seq in dataset {
        let trace = model.forward(seq, true)?.trace.expect("trace requested");
        let flat: Vec<Vec<f64>> = trace
            .layers
            .iter()
            .map(|l| flatten_causal(l.probs.as_ref().expect("full layers record probabilities")))
            .collect();
        for (i, s) in sums.iter_mut().enumerate() {
            *s += cosine_sim(&flat[i + 1], &flat[i])?;
        }
    }
    let layers = sums
        .into_iter()
        .enumerate()
        .map(|(i, s)| LayerSimilarity { layer: i + 2, sim: s / dataset.len() as f64 })
        .collect();
    Ok(SimilarityReport::from_values(layers))
}
