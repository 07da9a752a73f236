use serde::Serialize;

use crate::model::{LayerRole, ModelConfig, VariantSpec};

/// Bytes charged per cached float.
pub const BYTES_PER_FLOAT: usize = 8;

/// Fraction of Baseline KV-cache a variant keeps: K-only drops count half a
/// layer, K-and-V drops a whole layer.
pub fn kv_retain(n_layers: usize, variant: &VariantSpec) -> f64 {
    let (k_only, both) = match variant {
        VariantSpec::Baseline => (0, 0),
        VariantSpec::UniAttn { plan, .. } => (plan.reuse_count(), 0),
        VariantSpec::Cla { plan } => (0, plan.reuse_count()),
        VariantSpec::LlmDrop { dropped } => (0, dropped.len()),
    };
    1.0 - (0.5 * k_only as f64 + both as f64) / n_layers as f64
}

/// Percentage with one decimal, ties rounded away from zero (`0.8125` → `81.3%`).
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}%", (fraction * 1000.0).round() / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeqCost {
    pub seq_len: usize,
    pub kv_bytes: usize,
    pub attention_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub kv_retain_rate: f64,
    pub softmax_layer_count: usize,
    pub per_length: Vec<SeqCost>,
}

/// Analytic cost model. A layer that runs a Softmax is charged `2·l²·d` for
/// scores and value mixing, a probability-reusing layer `l²·d`, a dropped layer
/// nothing.
pub fn cost_profile(config: &ModelConfig, seq_lens: &[usize]) -> CostReport {
    let roles = config.roles();
    let softmax_layer_count = roles.iter().filter(|r| r.computes_softmax()).count();
    let kvw = config.kv_width();
    let per_length = seq_lens
        .iter()
        .map(|&l| {
            let mut kv_floats = 0;
            let mut flops = 0.0;
            let l2d = (l * l * config.d_model) as f64;
            for role in &roles {
                kv_floats += (role.stores_k() as usize + role.stores_v() as usize) * l * kvw;
                flops += match role {
                    LayerRole::Full | LayerRole::SharedKv { .. } => 2.0 * l2d,
                    LayerRole::SharedProbs { .. } => l2d,
                    LayerRole::Dropped => 0.0,
                };
            }
            SeqCost { seq_len: l, kv_bytes: kv_floats * BYTES_PER_FLOAT, attention_flops: flops }
        })
        .collect();
    CostReport {
        variant: config.variant.name().to_string(),
        kv_retain_rate: kv_retain(config.n_layers, &config.variant),
        softmax_layer_count,
        per_length,
    }
}
