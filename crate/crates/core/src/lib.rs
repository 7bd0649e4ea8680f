//! Online Bayesian parameter estimation for affine term-structure models.
//!
//! The outer layer is a particle population over model parameters; the
//! inner layer is a Kalman filter on the latent factors. See [`estimators`]
//! for the drivers and [`simkit`] for synthetic data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN. Index loops over
// several parallel arrays read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod affine;
pub mod error;
pub mod estimators;
pub mod kalman;
pub mod model;
pub mod riccati;
pub mod simkit;
pub mod smc;

pub use error::{Error, Result};
