//! Dense matrices, seeded sampling and decompositions.

pub mod linalg;
mod matrix;
mod rng;
mod svd;

pub use matrix::{dot, Matrix};
pub use rng::{sample_gaussian, sample_matrix_normal, RngState};
pub use svd::{svd, svd_with, SvdResult, DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE};
