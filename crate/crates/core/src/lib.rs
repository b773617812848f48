pub mod autograd;
pub mod error;
pub mod evalkit;
pub mod grouper;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod priors;
pub mod profiler;
pub mod seed;
pub mod synthworld;

pub use error::{Error, Result};
