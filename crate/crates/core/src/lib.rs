//! Token-level uncertainty scores for autoregressive sequence models and an
//! evaluation harness for locating erroneous reasoning steps.

pub mod backend;
pub mod commands;
pub mod consistency;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod selftest;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
