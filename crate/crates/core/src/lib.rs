//! Few-shot conformal prediction with auxiliary tasks.
//!
//! Nonconformity scorers are fitted per task on a handful of support
//! examples. A permutation-invariant network predicts, from a task's
//! leave-one-out scores, the quantile of its test scores; a correction
//! estimated on calibration tasks turns that prediction into a threshold
//! with coverage guarantees across tasks.

pub mod calibration;
pub mod conformal;
pub mod error;
pub mod harness;
pub mod models;
pub mod quantile;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
