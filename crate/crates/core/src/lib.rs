//! Federated learning robustness lab: a small MLP trainer, data loading and
//! partitioning, poisoning attacks, robust aggregation rules including a
//! last-layer similarity defense, a feature diagnostics study and an
//! experiment harness with reproducible reports.

pub mod aggregation;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod report;
pub mod seed;
pub mod sim;

pub use error::{FslError, Result};
