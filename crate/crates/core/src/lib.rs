//! Exact tabular analysis and sample-based training for reflective,
//! multi-step clipped policy optimization.

pub mod advantage;
pub mod env;
pub mod error;
pub mod mdp;
pub mod objective;
pub mod policy;
pub mod report;
pub mod theory;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
