//! Safe adversarial bandits with delayed feedback.

pub mod banker;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod lowerbound;
pub mod mirror;
pub mod numeric;
pub mod protocol;
pub mod prudent;

pub use error::{Error, Result};
