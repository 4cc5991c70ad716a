//! Mechanistically-informed spatio-temporal modelling.
//!
//! This crate implements a Bayesian hierarchical model for noisy, partially
//! observed space-time fields in which the latent dynamics are represented by
//! a physics-informed neural network (here constrained by the 1-D viscous
//! Burgers' equation), the large-scale mean by covariate regression, and the
//! model-data discrepancy by a per-time Gaussian process. Posterior inference
//! runs on a No-U-Turn sampler backed by a scalar reverse-mode tape that can
//! differentiate through the forward-mode input derivatives appearing in the
//! PDE residual.
//!
//! Alongside the hierarchical model the crate provides the classical
//! mechanistic estimators the model generalizes: optimal interpolation, the
//! Kalman filter, strong- and weak-constraint 4DVar, and a Gaussian-process
//! collocation solver for linear differential operators.
//!
//! Modules:
//! - [`grid`]: space-time grids, fields with missingness, observation operators
//! - [`autodiff`]: reverse-mode tape + second-order duals for input derivatives
//! - [`gp`]: Gaussian-process kernels, exact sampling, kriging conditionals
//! - [`burgers`]: spectral Burgers solver, Cole-Hopf oracle, differentiable step
//! - [`sim`]: the end-to-end synthetic data-generating pipeline
//! - [`model`]: the hierarchical log joint density and posterior prediction
//! - [`nuts`]: No-U-Turn sampling with dual-averaging adaptation
//! - [`assim`]: optimal interpolation, Kalman filtering, 4DVar
//! - [`pnm`]: probabilistic-numerics collocation for linear operators

pub mod assim;
pub mod autodiff;
pub mod burgers;
pub mod error;
pub mod gp;
pub mod grid;
pub mod model;
pub mod nuts;
pub mod pnm;
pub mod sim;

pub(crate) mod opt;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
