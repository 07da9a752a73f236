//! Superblock planning and linear compensation.

mod compensation;
mod init;
mod plan;

pub use compensation::{CompensationMeta, CompensationSet, InitMode};
pub use init::{
    compute_epsilon, error_report, group_average, init_compensation, init_compensation_ordered,
    logits_gap, CalibrationBatch, InitOrder, LayerError,
};
pub use plan::{plan_adaptive, plan_fixed, SuperblockPlan};
