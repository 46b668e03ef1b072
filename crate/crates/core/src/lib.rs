//! Gradient-based bearing(-and-range) formation control with reshaping
//! functions optimized for short agent paths.

pub mod error;
pub mod formation;
pub mod controller;
pub mod reshaping;
pub mod ode;
pub mod simulator;
pub mod scenario;
pub mod par;
pub mod sqp;
pub mod optimizer;
pub mod metrics;
pub mod experiment;

pub use error::{Error, Result};
