use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uniattn::SuperblockPlan;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    /// Rotary embedding on queries and keys wherever they are computed.
    Rope,
    None,
}

/// Attention variant applied on top of the (possibly grouped-query) decoder.
///
/// Layer indices inside plans and drop sets are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VariantSpec {
    Baseline,
    /// Non-bottom layers of each group attend with the bottom layer's K and V.
    Cla { plan: SuperblockPlan },
    /// Listed layers bypass their MHA submodule; their FFN still runs.
    LlmDrop { dropped: BTreeSet<usize> },
    /// Non-bottom layers reuse the bottom layer's attention probabilities.
    /// With `compensated`, each of them adds `x · W_c` on the residual path.
    UniAttn { plan: SuperblockPlan, compensated: bool },
}

impl VariantSpec {
    pub fn name(&self) -> &'static str {
        match self {
            VariantSpec::Baseline => "baseline",
            VariantSpec::Cla { .. } => "cla",
            VariantSpec::LlmDrop { .. } => "llmdrop",
            VariantSpec::UniAttn { .. } => "uniattn",
        }
    }
}

/// What one layer does in the attention submodule (0-based bottoms).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    /// Computes its own Q, K, V and Softmax.
    Full,
    /// Own Q; K and V come from `bottom`.
    SharedKv { bottom: usize },
    /// Own V; attention probabilities come from `bottom`.
    SharedProbs { bottom: usize },
    /// MHA bypassed.
    Dropped,
}

impl LayerRole {
    pub fn stores_k(self) -> bool {
        matches!(self, LayerRole::Full)
    }

    pub fn stores_v(self) -> bool {
        matches!(self, LayerRole::Full | LayerRole::SharedProbs { .. })
    }

    pub fn computes_softmax(self) -> bool {
        matches!(self, LayerRole::Full | LayerRole::SharedKv { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    pub positional: Positional,
    pub variant: VariantSpec,
}

impl ModelConfig {
    /// Small Baseline config with `d_head = 16`.
    pub fn toy(n_layers: usize, d_model: usize, vocab_size: usize) -> Self {
        let d_head = 16.min(d_model);
        Self {
            n_layers,
            d_model,
            n_heads: d_model / d_head,
            n_kv_heads: d_model / d_head,
            d_head,
            d_ff: 2 * d_model,
            vocab_size,
            max_seq: 64,
            norm_eps: 1e-6,
            positional: Positional::Rope,
            variant: VariantSpec::Baseline,
        }
    }

    pub fn with_variant(&self, variant: VariantSpec) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) x d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_kv_heads ({}) must divide n_heads ({})",
                self.n_kv_heads, self.n_heads
            )));
        }
        if self.positional == Positional::Rope && !self.d_head.is_multiple_of(2) {
            return Err(Error::Config("rotary embeddings need an even d_head".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive and finite".into()));
        }
        match &self.variant {
            VariantSpec::Baseline => {}
            VariantSpec::Cla { plan } | VariantSpec::UniAttn { plan, .. } => {
                plan.validate_for(self.n_layers)?
            }
            VariantSpec::LlmDrop { dropped } => {
                if let Some(&bad) = dropped.iter().find(|&&l| l == 0 || l > self.n_layers) {
                    return Err(Error::Config(format!(
                        "dropped layer {bad} outside 1..={}",
                        self.n_layers
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-layer roles, indexed 0-based.
    pub fn roles(&self) -> Vec<LayerRole> {
        (1..=self.n_layers)
            .map(|layer| match &self.variant {
                VariantSpec::Baseline => LayerRole::Full,
                VariantSpec::Cla { plan } => match plan.bottom_of(layer) {
                    Some(b) => LayerRole::SharedKv { bottom: b - 1 },
                    None => LayerRole::Full,
                },
                VariantSpec::UniAttn { plan, .. } => match plan.bottom_of(layer) {
                    Some(b) => LayerRole::SharedProbs { bottom: b - 1 },
                    None => LayerRole::Full,
                },
                VariantSpec::LlmDrop { dropped } => {
                    if dropped.contains(&layer) {
                        LayerRole::Dropped
                    } else {
                        LayerRole::Full
                    }
                }
            })
            .collect()
    }

    /// Reusing layers (1-based) that carry a compensation matrix.
    pub fn compensated_layers(&self) -> Vec<usize> {
        match &self.variant {
            VariantSpec::UniAttn { plan, compensated: true } => plan.reusing_layers(),
            _ => Vec::new(),
        }
    }
}
