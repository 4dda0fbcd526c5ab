//! Experiment orchestration for the gradient-amplified defenses in
//! [`gradamp`]: TOML configs, the federated round loop, paired clean and
//! attacked runs, CSV/SVG reports and parameter sweeps.

pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod pca;
pub mod plot;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{HarnessError, HarnessResult};
pub use experiment::{run_experiment, run_pair, simulate, Role, RunOutcome};
