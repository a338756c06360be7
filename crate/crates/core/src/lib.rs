//! Radio resource management under non-stationary fading: channel synthesis,
//! classical allocators, learned allocators and the experiment harness.

pub mod bench;
pub mod channel;
pub mod dqn;
pub mod envgen;
pub mod error;
pub mod nn;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
