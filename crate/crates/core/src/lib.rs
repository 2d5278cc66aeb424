//! Numerical laboratory for the Hessian block structure of linear and
//! one-hidden-layer ReLU classifiers under MSE and cross-entropy loss.

pub mod data;
pub mod experiments;
pub mod hessian;
pub mod io;
pub mod limits;
pub mod models;
pub mod params;
pub mod quadrature;
pub mod rng;
pub mod spectral;
pub mod stats;
