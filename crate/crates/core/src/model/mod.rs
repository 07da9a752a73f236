//! Toy Pre-Norm decoder and its attention variants.

mod cache;
mod config;
mod forward;
pub(crate) mod ops;
mod trace;
mod weights;

pub use cache::{KVCache, LayerCache};
pub use config::{LayerRole, ModelConfig, Positional, VariantSpec, ROPE_BASE};
pub(crate) use forward::Tape;
pub use forward::{ForwardOutput, Model};
pub use trace::{mha_io_similarity, select_dropped, ForwardTrace, LayerTrace};
pub use weights::{LayerWeights, Weights, LAYER_PARAMS};
