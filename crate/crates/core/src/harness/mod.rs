//! Data ingestion, task streams, experiment orchestration and persistence.

pub mod config;
pub mod data;
pub mod prng;
pub mod record;
pub mod run;
pub mod stream;

pub use config::ExperimentConfig;
pub use record::{curve_points, emit_curve, RunRecord};
pub use run::{run_experiment, sweep};
