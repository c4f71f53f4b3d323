//! Desk-scale reproductions of the simulation studies.

pub mod baseline;
pub mod config;
pub mod montecarlo;
pub mod simulate;
pub mod sweep;
pub mod toy;

pub use config::ExperimentConfig;
pub use montecarlo::{monte_carlo_cp, CpEstimate};
pub use simulate::{run_experiment, ExperimentOutput, SummaryTable};
