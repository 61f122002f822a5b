//! Data loading, task streams, experiment orchestration and reporting.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod idx;
pub mod report;
pub mod stream;
pub mod synthetic;

pub use config::{ExperimentConfig, ExpertKind};
pub use eval::AccuracyMatrix;
pub use experiment::{run_cp_sweep, run_experiment, run_sweep, ExperimentResult};
pub use stream::{build_stream, StreamKind, StreamSpec, TaskStream};
