use std::time::Duration;

use crate::executors::ExecutorBinding;

/// Default drain deadline for [`Pipeline::stop`](super::Pipeline::stop) and drop.
pub const DEFAULT_DRAIN_DEADLINE: Duration = Duration::from_secs(10);

/// Completions considered by `failure_abort_ratio`.
pub const FAILURE_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorPolicy {
    /// Drop the failed item, count it and keep going.
    #[default]
    SkipAndRecord,
    /// Abort the pipeline on the first failure.
    FailFast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderMode {
    /// Outputs leave a stage as soon as they complete.
    #[default]
    Completion,
    /// Outputs leave a stage in input order; a reorder buffer holds early finishers.
    Fifo,
}

/// Per-stage settings of a map stage.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub(crate) name: Option<String>,
    pub(crate) concurrency: usize,
    pub(crate) queue_capacity: Option<usize>,
    pub(crate) executor: ExecutorBinding,
    pub(crate) error_policy: ErrorPolicy,
    pub(crate) failure_abort_ratio: Option<f64>,
    pub(crate) ordering: Option<OrderMode>,
    pub(crate) reserve_output_slot: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            name: None,
            concurrency: 1,
            queue_capacity: None,
            executor: ExecutorBinding::shared(),
            error_policy: ErrorPolicy::default(),
            failure_abort_ratio: None,
            ordering: None,
            reserve_output_slot: false,
        }
    }
}

impl StageConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Shorthand for `StageConfig::new().concurrency(n)`.
    pub fn with_concurrency(n: usize) -> Self {
        Self::new().concurrency(n)
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Maximum tasks of this stage started at once.
    pub fn concurrency(mut self, n: usize) -> Self {
        self.concurrency = n;
        self
    }

    /// Output queue slots. Defaults to the stage's concurrency.
    pub fn queue_capacity(mut self, n: usize) -> Self {
        self.queue_capacity = Some(n);
        self
    }

    pub fn executor(mut self, binding: ExecutorBinding) -> Self {
        self.executor = binding;
        self
    }

    pub fn error_policy(mut self, policy: ErrorPolicy) -> Self {
        self.error_policy = policy;
        self
    }

    /// Abort once more than `ratio` of the last 100 completions failed.
    pub fn failure_abort_ratio(mut self, ratio: f64) -> Self {
        self.failure_abort_ratio = Some(ratio);
        self
    }

    pub fn ordering(mut self, mode: OrderMode) -> Self {
        self.ordering = Some(mode);
        self
    }

    /// Start a task only when its result is guaranteed a free output slot.
    ///
    /// Off by default: a finished result then waits in its concurrency slot
    /// until the output queue has room. Turning it on bounds stages with
    /// large outputs (batch buffers) to their output capacity, at the cost of
    /// capping effective concurrency at the free output slots.
    pub fn reserve_output_slot(mut self, on: bool) -> Self {
        self.reserve_output_slot = on;
        self
    }

    pub fn effective_queue_capacity(&self) -> usize {
        self.queue_capacity.unwrap_or(self.concurrency)
    }

    pub(crate) fn validate(&self) -> Result<(), BuildError> {
        if self.concurrency == 0 {
            return Err(BuildError::ZeroConcurrency);
        }
        if self.queue_capacity == Some(0) {
            return Err(BuildError::ZeroQueueCapacity);
        }
        if self.executor.size() == Some(0) {
            return Err(BuildError::ZeroExecutorSize);
        }
        if let Some(r) = self.failure_abort_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(BuildError::InvalidAbortRatio(r));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BuildError {
    #[error("a source was already added")]
    DuplicateSource,
    #[error("no source was added")]
    MissingSource,
    #[error("a sink was already added")]
    DuplicateSink,
    #[error("no sink was added")]
    MissingSink,
    #[error("stages cannot be added after the sink")]
    StageAfterSink,
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
    #[error("queue capacity must be at least 1")]
    ZeroQueueCapacity,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("sink buffer size must be at least 1")]
    ZeroSinkCapacity,
    #[error("worker count must be at least 1")]
    ZeroWorkers,
    #[error("executor pool size must be at least 1")]
    ZeroExecutorSize,
    #[error("failure abort ratio {0} is outside (0, 1]")]
    InvalidAbortRatio(f64),
    #[error("remote stages need bytes input; a subprocess binding needs a registered function")]
    RemoteBinding,
    #[error("the builder was already used to build a pipeline")]
    AlreadyBuilt,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = StageConfig::with_concurrency(12);
        assert_eq!(c.effective_queue_capacity(), 12);
        assert_eq!(c.error_policy, ErrorPolicy::SkipAndRecord);
        assert!(c.failure_abort_ratio.is_none());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        assert_eq!(
            StageConfig::with_concurrency(0).validate(),
            Err(BuildError::ZeroConcurrency)
        );
        assert_eq!(
            StageConfig::new().queue_capacity(0).validate(),
            Err(BuildError::ZeroQueueCapacity)
        );
        assert_eq!(
            StageConfig::new()
                .executor(ExecutorBinding::dedicated(0))
                .validate(),
            Err(BuildError::ZeroExecutorSize)
        );
        assert!(StageConfig::new()
            .failure_abort_ratio(0.0)
            .validate()
            .is_err());
        assert!(StageConfig::new()
            .failure_abort_ratio(1.0)
            .validate()
            .is_ok());
    }
}
