//! Data-driven probabilistic performance certificates for classical and
//! learned fixed-point optimizers.

pub mod bounds;
pub mod calibration;
pub mod config;
pub mod error;
pub mod fixed_point;
pub mod kl;
pub mod learned;
pub mod linalg;
pub mod pipeline;
pub mod problems;
pub mod report;
pub mod rng;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
