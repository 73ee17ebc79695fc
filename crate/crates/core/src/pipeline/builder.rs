use std::fmt::Display;
use std::marker::PhantomData;
use std::sync::Arc;

use super::config::{BuildError, OrderMode, StageConfig};
use super::runtime::{Item, Source, StageFn, StageSpec};
use super::Pipeline;
use crate::deferred::Deferred;
use crate::executors::{ExecutorKind, RemoteFunctionRegistry};

#[derive(Default)]
struct Parts {
    source: Option<Source>,
    stages: Vec<StageSpec>,
    sink_capacity: Option<usize>,
    ordering: OrderMode,
    error: Option<BuildError>,
}

impl Parts {
    fn fail(&mut self, e: BuildError) {
        self.error.get_or_insert(e);
    }

    fn check_stage(&mut self) -> bool {
        if self.source.is_none() {
            self.fail(BuildError::MissingSource);
        }
        if self.sink_capacity.is_some() {
            self.fail(BuildError::StageAfterSink);
        }
        self.error.is_none()
    }
}

/// Declarative description of a linear pipeline.
///
/// `T` is the item type at the end of the chain so far. Misuse such as a second
/// source or a zero concurrency is recorded and reported by [`build`](Self::build).
///
/// ```
/// use spindle::{PipelineBuilder, StageConfig};
///
/// let mut pipeline = PipelineBuilder::new()
///     .add_source(1..=100u32)
///     .map(|x| x * 2, StageConfig::with_concurrency(4))
///     .aggregate(32)
///     .add_sink(3)
///     .build(4)
///     .unwrap();
///
/// let sizes: Vec<usize> = (&mut pipeline).into_iter().map(|b| b.unwrap().len()).collect();
/// assert_eq!(sizes, [32, 32, 32, 4]);
/// ```
pub struct PipelineBuilder<T> {
    parts: Option<Parts>,
    _marker: PhantomData<fn() -> T>,
}

impl PipelineBuilder<()> {
    pub fn new() -> Self {
        Self {
            parts: Some(Parts::default()),
            _marker: PhantomData,
        }
    }
}

impl Default for PipelineBuilder<()> {
    fn default() -> Self {
        Self::new()
    }
}

fn erase<T: Send + 'static>(v: T) -> Item {
    Box::new(v)
}

fn unerase<T: 'static>(item: Item) -> T {
    *item
        .downcast::<T>()
        .unwrap_or_else(|_| unreachable!("stage input type is fixed by the builder"))
}

impl<T: Send + 'static> PipelineBuilder<T> {
    fn retype<U>(self) -> PipelineBuilder<U> {
        PipelineBuilder {
            parts: self.parts,
            _marker: PhantomData,
        }
    }

    fn with_parts(mut self, f: impl FnOnce(&mut Parts)) -> Self {
        if let Some(p) = self.parts.as_mut() {
            f(p);
        }
        self
    }

    /// Sets the source. It is pulled lazily by the control thread, only as
    /// downstream capacity frees up.
    pub fn add_source<I>(self, source: I) -> PipelineBuilder<I::Item>
    where
        I: IntoIterator,
        I::IntoIter: Send + 'static,
        I::Item: Send + 'static,
    {
        self.with_parts(|p| {
            if p.source.is_some() {
                p.fail(BuildError::DuplicateSource);
            } else {
                p.source = Some(Box::new(source.into_iter().map(erase)));
            }
        })
        .retype()
    }

    fn push_map(self, config: StageConfig, func: StageFn) -> Self {
        self.with_parts(|p| {
            if !p.check_stage() {
                return;
            }
            if let Err(e) = config.validate() {
                return p.fail(e);
            }
            if matches!(config.executor.kind, ExecutorKind::SubprocessPool { .. })
                && !matches!(func, StageFn::Remote { .. })
            {
                return p.fail(BuildError::RemoteBinding);
            }
            p.stages.push(StageSpec::Map { config, func });
        })
    }

    /// Appends a fallible map stage.
    pub fn pipe<U, E, F>(self, func: F, config: StageConfig) -> PipelineBuilder<U>
    where
        U: Send + 'static,
        E: Display,
        F: Fn(T) -> Result<U, E> + Send + Sync + 'static,
    {
        let f = StageFn::Sync(Arc::new(move |item: Item| {
            func(unerase::<T>(item))
                .map(erase)
                .map_err(|e| e.to_string())
        }));
        self.push_map(config, f).retype()
    }

    /// Appends an infallible map stage.
    pub fn map<U, F>(self, func: F, config: StageConfig) -> PipelineBuilder<U>
    where
        U: Send + 'static,
        F: Fn(T) -> U + Send + Sync + 'static,
    {
        let f = StageFn::Sync(Arc::new(move |item: Item| {
            Ok(erase(func(unerase::<T>(item))))
        }));
        self.push_map(config, f).retype()
    }

    /// Appends a stage whose function returns a deferred completion. The
    /// function is invoked on a worker, which is released as soon as it
    /// returns; the stage slot stays taken until the completion resolves.
    pub fn pipe_deferred<U, E, F>(self, func: F, config: StageConfig) -> PipelineBuilder<U>
    where
        U: Send + 'static,
        E: Display + Send + 'static,
        F: Fn(T) -> Deferred<Result<U, E>> + Send + Sync + 'static,
    {
        let f = StageFn::Deferred(Arc::new(move |item: Item| {
            let (completer, out) = crate::deferred::deferred();
            func(unerase::<T>(item)).on_complete(move |r| {
                completer.complete(match r {
                    Ok(Ok(v)) => Ok(erase(v)),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(c) => Err(c.to_string()),
                })
            });
            out
        }));
        self.push_map(config, f).retype()
    }

    /// Groups items into lists of `batch_size`; a shorter final list is emitted.
    pub fn aggregate(self, batch_size: usize) -> PipelineBuilder<Vec<T>> {
        self.aggregate_with(batch_size, true)
    }

    /// Like [`aggregate`](Self::aggregate); with `flush_remainder = false` a
    /// short final list is dropped and counted in the stop report.
    pub fn aggregate_with(
        self,
        batch_size: usize,
        flush_remainder: bool,
    ) -> PipelineBuilder<Vec<T>> {
        self.with_parts(|p| {
            if !p.check_stage() {
                return;
            }
            if batch_size == 0 {
                return p.fail(BuildError::ZeroBatchSize);
            }
            let collect = Arc::new(|items: Vec<Item>| -> Item {
                erase(items.into_iter().map(unerase::<T>).collect::<Vec<T>>())
            });
            p.stages.push(StageSpec::Aggregate {
                batch_size,
                flush_remainder,
                collect,
            });
        })
        .retype()
    }

    /// Default ordering of stages whose config does not set one.
    pub fn ordering(self, mode: OrderMode) -> Self {
        self.with_parts(|p| p.ordering = mode)
    }

    /// Sets the bounded sink the consumer reads from.
    pub fn add_sink(self, buffer_size: usize) -> Self {
        self.with_parts(|p| {
            if p.source.is_none() {
                p.fail(BuildError::MissingSource);
            } else if p.sink_capacity.is_some() {
                p.fail(BuildError::DuplicateSink);
            } else if buffer_size == 0 {
                p.fail(BuildError::ZeroSinkCapacity);
            } else {
                p.sink_capacity = Some(buffer_size);
            }
        })
    }

    /// Allocates queues and the shared worker pool. Nothing runs until the
    /// first item is requested or [`Pipeline::start`] is called. The builder
    /// is single-use.
    pub fn build(&mut self, worker_count: usize) -> Result<Pipeline<T>, BuildError> {
        let parts = self.parts.take().ok_or(BuildError::AlreadyBuilt)?;
        if let Some(e) = parts.error {
            return Err(e);
        }
        let source = parts.source.ok_or(BuildError::MissingSource)?;
        let sink_capacity = parts.sink_capacity.ok_or(BuildError::MissingSink)?;
        if worker_count == 0 {
            return Err(BuildError::ZeroWorkers);
        }
        Ok(Pipeline::new(
            source,
            parts.stages,
            sink_capacity,
            worker_count,
            parts.ordering,
        ))
    }
}

impl PipelineBuilder<Vec<u8>> {
    /// Appends a stage running the registered function `name`. With a
    /// subprocess binding it runs in worker processes; otherwise the same
    /// function runs in-process on the bound thread pool.
    pub fn pipe_remote(
        self,
        registry: Arc<RemoteFunctionRegistry>,
        name: impl Into<String>,
        config: StageConfig,
    ) -> Self {
        let name = name.into();
        self.push_map(config, StageFn::Remote { registry, name })
    }
}

impl<T> std::fmt::Debug for PipelineBuilder<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PipelineBuilder")
            .field("stages", &self.parts.as_ref().map(|p| p.stages.len()))
            .finish()
    }
}
