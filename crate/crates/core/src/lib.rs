//! Quantile-baseline advantage estimation for group-based policy
//! optimization with verifiable binary rewards, together with a small
//! synthetic training lab for studying its entropy dynamics.

pub mod advantage;
pub mod config;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod presets;
pub mod report;
pub mod runner;
pub mod sim;
pub mod surrogate;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
