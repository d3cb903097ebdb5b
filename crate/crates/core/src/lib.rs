pub mod baselines;
pub mod classifier_bank;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod memory_buffer;
pub mod numerics;
pub mod parallel;
pub mod trainer;

pub use error::{Error, Result};
