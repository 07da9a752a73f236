use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::linalg::{cosine_sim, Matrix};

/// Activations recorded for one layer.
///
/// `x_in` and `x_mid` double as the MHA submodule's input/output pair:
/// `x_mid = x_in + MHA(Norm(x_in)) [+ x_in · W_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Block input `x_i`.
    pub x_in: Matrix,
    /// MHA output including the residual, `x_i'`.
    pub x_mid: Matrix,
    /// Per-head causal attention probabilities; only for layers that run a Softmax.
    pub probs: Option<Vec<Matrix>>,
    /// Post-rotary keys the layer attended with (own or shared).
    pub keys: Option<Matrix>,
    /// Values the layer attended with (own or shared).
    pub values: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Output of the last block, before the final norm.
    pub final_hidden: Matrix,
}

impl ForwardTrace {
    /// Block input of 1-based `layer`, or the final hidden state for `layer = L + 1`.
    pub fn block_input(&self, layer: usize) -> Option<&Matrix> {
        match layer {
            0 => None,
            l if l <= self.layers.len() => Some(&self.layers[l - 1].x_in),
            l if l == self.layers.len() + 1 => Some(&self.final_hidden),
            _ => None,
        }
    }
}

/// Cosine similarity between each layer's flattened MHA input `x_i` and output
/// `x_i'`, averaged over `traces`.
pub fn mha_io_similarity(traces: &[ForwardTrace]) -> Result<Vec<f64>> {
    let first = traces.first().ok_or_else(|| Error::MissingTrace("no traces given".into()))?;
    let n = first.layers.len();
    let mut sums = vec![0.0; n];
    for t in traces {
        if t.layers.len() != n {
            return Err(Error::MissingTrace(format!(
                "trace covers {} layers, expected {n}",
                t.layers.len()
            )));
        }
        for (s, lt) in sums.iter_mut().zip(&t.layers) {
            *s += cosine_sim(lt.x_in.data(), lt.x_mid.data())?;
        }
    }
    Ok(sums.into_iter().map(|s| s / traces.len() as f64).collect())
}

/// The `count` layers (1-based) with the highest MHA input-output similarity,
/// ties going to the lower layer.
pub fn select_dropped(sims: &[f64], count: usize) -> Result<BTreeSet<usize>> {
    if count > sims.len() {
        return Err(Error::Config(format!("cannot drop {count} of {} layers", sims.len())));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(count).map(|i| i + 1).collect())
}
