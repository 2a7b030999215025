//! Federated-learning simulation with calibrated-loss participant selection
//! and feedback-controlled resampling.
//!
//! Modules follow the life of a run: [`dataset`] builds and partitions data,
//! [`model`] trains and evaluates classifiers, [`client`] performs one local
//! update, [`selection`] picks each round's cohort, [`server`] drives the
//! rounds, and [`cli`] wraps it all in the `fedclf` binary.

pub mod cli;
pub mod client;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod model;
pub mod seed;
pub mod selection;
pub mod server;

pub use error::{Error, Result};
