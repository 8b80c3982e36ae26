//! Desk-scale experiment harness: a synthetic domain-incremental stream, a
//! frozen transformer stub, the multi-stage training protocol, metrics,
//! persistence and reports.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod report;
pub mod stream;
pub mod train;
pub mod xcomp;

pub use config::{Component, ExperimentConfig};
pub use error::{HarnessError, Result};
