//! Configuration, run-directory persistence and resumable parameter sweeps.

pub mod config;
pub mod rundir;
pub mod sweep;

pub use config::{Cell, ExperimentSpec, InstanceSpec, RewardFamily, RewardSpec, RunSpec};
pub use rundir::{persist_run, RunManifest};
pub use sweep::{parse_results, run_sweep, ResultRow, SweepOptions, SweepSummary};
