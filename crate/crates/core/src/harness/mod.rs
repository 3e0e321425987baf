//! Experiment orchestration: sweep specs, run directories, comparisons
//! and oracle sweeps.

pub mod compare;
pub mod dump;
pub mod oracle;
pub mod run;
pub mod spec;
pub mod svg;

pub use compare::{compare, epochs_to_threshold, Comparison, ComparisonRow};
pub use dump::{dump_weights, load_model};
pub use run::{load_run_dir, run, train_into, write_run_dir, PointResult, PointStatus, RunOptions};
pub use spec::{preset, ExperimentSpec, SweepPoint, PRESETS};
