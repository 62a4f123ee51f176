//! Multivariate calibration through pre-rank functions.
//!
//! The crate evaluates projected-PIT calibration of multivariate predictive
//! distributions, provides a differentiable calibration penalty for training a
//! Gaussian-mixture hypernetwork, and generates the covariance
//! misspecification scenarios used to study which pre-ranks detect what.

pub mod autodiff;
pub mod diagnostics;
pub mod model;
pub mod numerics;
pub mod preranks;
pub mod scenarios;
pub mod training;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
