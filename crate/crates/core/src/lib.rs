//! Staged data-loading pipelines with bounded queues, per-stage concurrency,
//! pluggable executors and built-in telemetry.
//!
//! A pipeline is a source iterator, a chain of map and aggregate stages, and a
//! bounded sink. One control thread schedules every stage; stage functions run
//! on a shared thread pool, a dedicated pool, or a pool of worker processes.
//! Memory stays bounded because a stage only starts work when its output has
//! room.

pub mod deferred;
pub mod executors;
pub mod media;
pub mod netsim;
pub mod pipeline;
pub mod telemetry;
mod threads;

pub use deferred::{deferred, Cancelled, Completer, Deferred};
pub use executors::{ExecutorBinding, ExecutorKind, RemoteFunctionRegistry, WorkerCommand};
pub use pipeline::{
    BuildError, ErrorPolicy, Next, OrderMode, Pipeline, PipelineBuilder, PipelineError,
    PipelineState, StageConfig, StopReport,
};
pub use telemetry::{bottleneck_hint, BottleneckHint, PipelineStats, StageStats, StatsHandle};
pub use threads::ThreadTracker;
