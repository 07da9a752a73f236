use crate::linalg::Matrix;

/// Cached keys (post-rotary) and values for one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub k: Option<Matrix>,
    pub v: Option<Matrix>,
}

impl LayerCache {
    pub fn has_k(&self) -> bool {
        self.k.is_some()
    }

    pub fn has_v(&self) -> bool {
        self.v.is_some()
    }
}

/// Per-layer KV cache. Which blocks are present depends on the layer role:
/// Softmax-reusing layers keep V only, KV-sharing and dropped layers keep nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    pub layers: Vec<LayerCache>,
    /// Tokens processed so far.
    pub len: usize,
}

impl KVCache {
    /// Bytes held, at 8 bytes per cached float.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| [l.k.as_ref(), l.v.as_ref()])
            .flatten()
            .map(|m| m.data().len() * 8)
            .sum()
    }

    /// `(has_k, has_v)` per layer.
    pub fn presence(&self) -> Vec<(bool, bool)> {
        self.layers.iter().map(|l| (l.has_k(), l.has_v())).collect()
    }
}
