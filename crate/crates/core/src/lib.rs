//! Sensitivity analysis to unobserved confounding when several outcomes share a
//! low-rank residual factor structure.

pub mod analysis;
pub mod bounds;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod error;
pub mod factor;
pub mod linalg;
pub mod null_controls;
pub mod regression;
pub mod robustness;
pub mod simulation;
pub mod svg;
pub mod uncertainty;

pub use error::{Error, Result};
