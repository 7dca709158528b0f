//! Coalescence of non-inertial particles under spatially correlated noise.

pub mod capacity;
pub mod cell;
pub mod covariance;
pub mod density;
pub mod error;
pub mod fv;
pub mod harness;
pub mod histogram;
pub mod kernel;
pub mod macro_pde;
pub mod neighbors;
pub mod particles;
pub mod physics;
pub mod quadrature;

pub use error::{Error, Result};
