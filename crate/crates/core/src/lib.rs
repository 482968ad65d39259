//! Doubly robust estimation and testing of scaled treatment effects on
//! multiple outcomes.
//!
//! Effects are standardized either by the control-arm standard deviation
//! (mean scale) or by the control-arm interquartile range (median scale).
//! Inference uses efficient influence functions or the pairs bootstrap.

pub mod error;
pub mod estimate;
pub mod influence;
pub mod mathkit;
pub mod model;
pub mod nuisance;
pub mod sim;
pub mod testing;

pub use error::{Error, Result};
