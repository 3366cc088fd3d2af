//! Transformer-based online TD3 for continuous control.

pub mod agents;
pub mod autodiff;
pub mod conditioning;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod replay;

pub use error::{Error, Result};
