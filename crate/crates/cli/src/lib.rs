//! Benchmark harness for spindle pipelines: config parsing, sweep runner,
//! resource sampling and CSV/JSON reports.

pub mod config;
pub mod report;
pub mod run;
pub mod sampler;

pub use config::{BenchConfig, ConfigError, ExecutorChoice, Workload};
pub use report::{emit_report, BaselineReport, BenchReport, BenchRow, Format};
pub use run::{
    pipeline_outputs, run_baseline_sequential, run_benchmark, sequential_outputs, RunError, Runner,
};
