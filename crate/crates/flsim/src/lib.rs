//! Federated-learning simulator with consistency-based malicious-client
//! detection: a quasi-Newton update predictor, windowed suspicious scores,
//! cluster-count selection, robust aggregation rules, and the poisoning
//! attacks needed to exercise them end to end.

pub mod aggregation;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod hvp;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod output;
pub mod sim;

pub use error::{Error, Result};
pub use linalg::{ParamVector, SmallMatrix};
