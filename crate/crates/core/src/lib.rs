//! Meta auxiliary learning: a multi-task classifier trained alongside a
//! label-generation network whose auxiliary labels are learned through a
//! second-order meta objective.

pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod hierarchy;
pub mod losses;
pub mod meta;
pub mod nn;

pub use error::{Error, Result};
