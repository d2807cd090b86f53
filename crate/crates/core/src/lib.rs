//! Quickest detection of false-data-injection attacks on sensor networks
//! running a Kalman consensus information filter.

pub mod bayes;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod kcif;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod nonbayes;
pub mod sim;
pub mod tables;
pub mod validate;

pub use error::{Error, Result};
