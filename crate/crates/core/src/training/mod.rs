//! Reverse-mode gradients, SGD and the two-stage schedule.

mod backward;
mod data;
mod gradcheck;
mod schedule;

pub use backward::{loss, loss_and_grads, GradStore};
pub use data::{random_tokens, toy_corpus};
pub use gradcheck::{gradcheck, rel_error, GradCheckReport, GradSample, REL_ERROR_FLOOR};
pub use schedule::{
    train_stage1, train_stage2, EmaTracker, LossRecord, Stage, TrainConfig, EMA_MIN_DELTA,
};
