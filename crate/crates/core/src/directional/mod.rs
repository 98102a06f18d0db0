//! von Mises-Fisher machinery on the unit hypersphere `S^{d−1}`.
//!
//! Everything here is a pure function of its arguments (plus an explicit RNG
//! for sampling), so it can be shared freely across worker threads.

mod bessel;
mod kappa;
mod tukey;
mod vmf;

pub use bessel::{log_bessel_i, log_bessel_i_scaled};
pub use kappa::{estimate_kappa, KappaEstimate, KappaRule, DEFAULT_KAPPA_MAX};
pub use tukey::{tukey_transform, TUKEY_LOG_EPS};
pub use vmf::{
    bessel_ratio, fit_vmf, log_normalizer, log_sphere_area, normalize, sample_vmf,
    uniform_unit_vector, vmf_log_density, ResultantSummary, VmfFit, VmfParams, DEGENERATE_NORM,
};
