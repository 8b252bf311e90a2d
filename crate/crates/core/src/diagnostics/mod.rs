//! Numerical checks of the rank-tied theory and experiment harnesses.
//!
//! * [`symmetry`]: which reparameterizations `R` of a rank-tied posterior
//!   keep both factor covariances diagonal.
//! * [`energy`]: cumulative energy curves of a mean update under svd,
//!   learned and random rank orderings.
//! * [`sweep`]: β, τ and sample-count sweeps over a base run config.

pub mod energy;
pub mod sweep;
pub mod symmetry;

pub use energy::{
    energy_curve, energy_curve_unnormalized, gauge_ordering_experiment, learned_order, EnergyCurve, GaugeReport,
    GaugeRow, Ordering,
};
pub use sweep::{sweep, SweepCell, SweepKind, SweepTable};
pub use symmetry::{
    mc_covariance_transform_check, residual_symmetry_check, theorem_suite, SymmetryCheck, SymmetryProbe,
    SymmetryReport, TheoremSuiteConfig,
};
