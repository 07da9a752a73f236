//! Measurement procedures and numeric checks.

mod cost;
mod depth;
mod similarity;
mod theory;

pub use cost::*;
pub use depth::*;
pub use similarity::*;
pub use theory::*;
