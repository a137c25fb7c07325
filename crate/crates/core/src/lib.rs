//! Instructable motion prior for a planar legged robot.

pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod nn;
pub mod prior;
pub mod report;
pub mod rewards;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
