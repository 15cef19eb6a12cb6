//! Planar stationary Gaussian fields: excursion and level-set component
//! counts, fields conditioned to have a saddle at the origin, saddle
//! connectivity classification and the closed-form critical-point densities
//! those Monte Carlo statistics are checked against.

pub mod config;
pub mod covariance;
pub mod critdens;
pub mod error;
pub mod estimators;
pub mod sampler;
pub mod specfun;
pub mod topology;

pub use error::{Error, Result};
