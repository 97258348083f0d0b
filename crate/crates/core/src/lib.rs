//! Stochastic control barrier function safety filters.

pub mod barrier;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod high_degree;
pub mod linalg;
pub mod qp;
pub mod scenario;
pub mod sde;
pub mod verify;

pub use error::{Error, Result};
