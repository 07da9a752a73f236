//! Softmax unification across Superblocks of a toy Pre-Norm decoder.
//!
//! The crate is split along the pipeline:
//!
//! * [`linalg`]: dense row-major matrices, SVD, pseudoinverse, softmax.
//! * [`model`]: the decoder with Baseline/GQA/CLA/LLMDrop/UniAttn attention.
//! * [`uniattn`]: Superblock plans and closed-form compensation init.
//! * [`training`]: hand-written backprop, SGD and the two-stage schedule.
//! * [`analysis`]: similarity profiling, depth factors, cost model, theory checks.

pub mod analysis;
pub mod error;
pub mod linalg;
pub mod model;
pub mod training;
pub mod uniattn;

pub use error::{Error, Result};
pub use linalg::{Matrix, RngStream};
