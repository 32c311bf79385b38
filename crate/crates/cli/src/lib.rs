//! Benchmark pipeline behind the `pnde` binary.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{model_id, preset, preset_names, RunConfig};
pub use pipeline::{run_checks, Run, RunError};
pub use report::{CheckResult, ModelReport, RunReport};
