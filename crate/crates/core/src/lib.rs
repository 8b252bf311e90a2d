//! Rank-tied variational dropout for low-rank adapters.
//!
//! A low-rank adapter `ΔW = (λ/r)·B·A` gets a Gaussian posterior in which
//! every entry of rank component `i` shares one noise-to-signal ratio
//! `α_i`. Training maximizes an ELBO with a closed-form KL surrogate that
//! pushes irrelevant ranks to large `α`, where they are pruned. The crate
//! also provides Monte Carlo predictive inference, calibration metrics and
//! numerical checks of the residual gauge symmetry of the rank-tied family.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod parallel;
pub mod task;
pub mod trainer;

pub use error::{LrvdError, Result};
