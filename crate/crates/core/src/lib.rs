//! Stint-time optimal energy and thermal management for electric race cars.
//!
//! The crate is organised bottom-up:
//!
//! * [`track`] – circuit representation, optimizer/simulation grids and the
//!   grip-limited kinetic-energy bound.
//! * [`model`] – longitudinal powertrain and thermal model, the AB2 stepper
//!   and its analytic inversion.
//! * [`socp`] – the convex minimum-stint-time problem, solved as a
//!   second-order cone program, and co-state extraction.
//! * [`liftcoast`] – throttle maps, full-throttle-or-coast stint simulation and
//!   threshold bisection.
//! * [`controller`] – shrinking-horizon MPC with PI threshold feedback.
//! * [`harness`] – closed-loop plant simulation, disturbances, a-priori oracle
//!   and strategy sweeps.
//! * [`nominal`] – the synthetic reference configuration.

pub mod controller;
pub mod error;
pub mod harness;

pub mod liftcoast;
pub mod model;
pub mod nominal;

pub mod socp;
pub mod track;

pub use error::{Error, Result};

/// Standard gravity [m/s²].
pub const GRAVITY: f64 = 9.81;
