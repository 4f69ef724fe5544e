pub mod cli;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod rationale_lm;
pub mod synthdata;

pub use error::{Error, Result};
