//! Simulation and estimation toolkit for RIS-enabled cooperative 3D
//! positioning of sidelink UEs without access points.

pub mod bounds;
pub mod channel;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod locator;
pub mod optim;
pub mod pipeline;
pub mod power;
pub mod profiles;
pub mod scenario;

pub use error::{Error, Result};
