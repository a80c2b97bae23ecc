//! Dual-path conditional VAE for controllable motion prediction.

pub mod app;
pub mod config;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod objectives;
pub mod plot;
pub mod sampler;

pub use error::{Error, Result};
