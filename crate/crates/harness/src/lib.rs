//! Experiment orchestration: configuration, training, evaluation, curvature
//! reports and verification suites behind the `noisecurve` CLI.

pub mod checkpoint;
pub mod config;
pub mod curvature_report;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod train;
pub mod transform;
pub mod verify;

pub use error::{HarnessError, Result};
