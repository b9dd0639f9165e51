//! Hybrid mechanistic/data-driven identification of limit-cycle oscillations
//! near a Hopf bifurcation.
//!
//! A low-order Hopf normal form supplies the bifurcation structure (fold and
//! Hopf points, branch stability); small neural networks learn the coordinate
//! map from normal-form coordinates to physical observations and the
//! oscillation speed around each orbit. Training needs only measured
//! limit-cycle time series at a handful of parameter values, and the result
//! extrapolates to unseen parameter values, including unstable branches.

pub mod coordinate_map;
pub mod dataset;
pub mod error;
pub mod model;
pub mod neural_net;
pub mod normal_form;
pub mod orbit_geometry;
pub mod periodic_orbits;
pub mod reference_systems;
pub mod speed_model;
pub mod training;

pub use error::{Error, Result};
