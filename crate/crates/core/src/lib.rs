//! Federated learning simulator with adaptive passport obfuscation, a suite
//! of privacy attacks and baseline defenses, and numeric checks of the
//! accompanying privacy bounds.

pub mod attacks;
pub mod defenses;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod passport;
pub mod theory;

pub use error::{Error, Result};
