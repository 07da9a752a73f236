//! Dense linear algebra on row-major `f64` matrices.

mod decomp;
mod matrix;
mod rng;
mod softmax;

pub use decomp::{least_squares, pseudoinverse, svd, SvdResult, DEFAULT_PINV_RTOL};
pub use matrix::{cosine_sim, dot, l2_norm, Matrix};
pub use rng::{gaussian_matrix, RngStream};
pub use softmax::{
    softmax_in_place, softmax_jacobian, softmax_jacobian_norm, softmax_jvp, softmax_rows,
};
