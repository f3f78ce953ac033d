pub mod diffcore;
pub mod error;
pub mod exemplars;
pub mod harness;
pub mod learners;
pub mod membudget;
pub mod metrics;
pub mod netblocks;
pub mod probes;

pub use error::{Error, Result};
