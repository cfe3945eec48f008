//! Stroke risk-state prediction with quadratic-interaction networks,
//! a multi-gate mixture of experts, and Shapley explanations.

pub mod autodiff;
pub mod cli;
pub mod dataset;
mod error;
pub mod explain;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
