use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive layer groups that share one Softmax activation.
///
/// Groups are 1-based inclusive `(start, end)` pairs. Only the bottom layer
/// (`start`) of a group computes attention probabilities; the other `end − start`
/// layers reuse them. Layers not covered by any group run unchanged.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperblockPlan {
    groups: Vec<(usize, usize)>,
}

impl SuperblockPlan {
    pub fn new(groups: Vec<(usize, usize)>) -> Result<Self> {
        for &(s, e) in &groups {
            if s == 0 || e < s {
                return Err(Error::Plan(format!("group [{s}-{e}] is not a 1-based range")));
            }
        }
        for w in groups.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(Error::Plan(format!(
                    "groups [{}-{}] and [{}-{}] overlap or are out of order",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(Self { groups })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn groups(&self) -> &[(usize, usize)] {
        &self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        match self.groups.last() {
            Some(&(_, e)) if e > n_layers => {
                Err(Error::Plan(format!("group ends at layer {e} but the model has {n_layers}")))
            }
            _ => Ok(()),
        }
    }

    /// Bottom layer of the group that `layer` reuses from, if `layer` is a
    /// non-bottom member of some group.
    pub fn bottom_of(&self, layer: usize) -> Option<usize> {
        self.groups.iter().find(|&&(s, e)| layer > s && layer <= e).map(|&(s, _)| s)
    }

    /// Non-bottom layers in ascending order (1-based).
    pub fn reusing_layers(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|&(s, e)| s + 1..=e).collect()
    }

    pub fn reuse_count(&self) -> usize {
        self.groups.iter().map(|&(s, e)| e - s).sum()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.groups.iter().any(|&(s, e)| layer >= s && layer <= e)
    }

    /// The last `ceil(n/2)` groups, used for the "Half" baselines.
    pub fn top_half(&self) -> Self {
        let keep = self.groups.len().div_ceil(2);
        Self { groups: self.groups[self.groups.len() - keep..].to_vec() }
    }
}

impl std::fmt::Display for SuperblockPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.groups.iter().map(|(s, e)| format!("[{s}-{e}]")).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Equal-size groups starting at `start_layer`.
///
/// As many whole blocks as fit below `n_layers` are created; a partial block
/// at the top is left ungrouped (42 layers from 22 in blocks of 4 gives
/// `[22-25] .. [38-41]`). A range too short for a single block is an error.
pub fn plan_fixed(n_layers: usize, start_layer: usize, block_size: usize) -> Result<SuperblockPlan> {
    if start_layer == 0 || start_layer > n_layers {
        return Err(Error::Plan(format!("start layer {start_layer} outside 1..={n_layers}")));
    }
    if block_size == 0 {
        return Err(Error::Plan("block size must be positive".into()));
    }
    let span = n_layers - start_layer + 1;
    if span < block_size {
        return Err(Error::Plan(format!(
            "layers {start_layer}..={n_layers} ({span}) cannot hold a block of {block_size}"
        )));
    }
    let groups = (0..span / block_size)
        .map(|g| {
            let s = start_layer + g * block_size;
            (s, s + block_size - 1)
        })
        .collect();
    SuperblockPlan::new(groups)
}

/// Similarity-driven grouping.
///
/// `sims[k]` is `Sim(k + 2)`, the similarity of layer `k + 2` to its
/// predecessor. The `budget` layers with the highest similarity are made to
/// reuse (ties go to the lower layer), maximal runs of selected layers are
/// merged with the layer below them into one group, and every other layer
/// becomes a singleton group.
pub fn plan_adaptive(sims: &[f64], budget: usize) -> Result<SuperblockPlan> {
    let n_layers = sims.len() + 1;
    if budget > sims.len() {
        return Err(Error::Plan(format!(
            "budget {budget} exceeds the {} layers that have a predecessor",
            sims.len()
        )));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut reuses = vec![false; n_layers + 1];
    for &k in order.iter().take(budget) {
        reuses[k + 2] = true;
    }
    let mut groups = Vec::new();
    let mut layer = 1;
    while layer <= n_layers {
        let start = layer;
        while layer < n_layers && reuses[layer + 1] {
            layer += 1;
        }
        groups.push((start, layer));
        layer += 1;
    }
    SuperblockPlan::new(groups)
}
